#include "roomroam/service.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include "roomroam/dataset.hpp"
#include "roomroam/error.hpp"
#include "roomroam/random.hpp"

namespace roomroam {

namespace {

using json = nlohmann::json;

HttpReply fail(int status, std::string_view code, std::string_view message, std::string_view detail = {}) {
  return {status, error_body(code, message, detail)};
}

// Maps library errors raised while reading a request layout.
HttpReply layout_error(const Error& e) {
  switch (e.code()) {
    case ErrorCode::Schema:
      return fail(400, "schema", e.what(), e.detail());
    case ErrorCode::InfeasibleLayout:
      return fail(422, "infeasible_layout", e.what(), e.detail());
    default:
      return fail(422, "layout_invariant", e.what(), e.detail());
  }
}

std::optional<json> parse_body(std::string_view body, HttpReply& err) {
  try {
    return json::parse(body);
  } catch (const json::exception& e) {
    err = fail(400, "schema", "request body is not valid JSON", e.what());
    return std::nullopt;
  }
}

}  // namespace

json error_body(std::string_view code, std::string_view message, std::string_view detail) {
  return {{"code", code}, {"message", message}, {"detail", detail}};
}

std::string model_version_of(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "rrvt-%012llx", static_cast<unsigned long long>(h >> 16));
  return buf;
}

json prediction_to_json(const Prediction& p) {
  json rows = json::array();
  for (int r = 0; r < p.heatmap.grid; ++r) {
    json row = json::array();
    for (int c = 0; c < p.heatmap.grid; ++c) row.push_back(p.heatmap.at(r, c));
    rows.push_back(std::move(row));
  }
  return {{"predicted_resets", p.resets}, {"heatmap", rows}};
}

Service::Service(ServiceConfig config) : config_(std::move(config)) {
  if (config_.sim_workers < 1) throw Error(ErrorCode::Config, "sim_workers must be at least 1");
  if (config_.time_budget_ms < 1) throw Error(ErrorCode::Config, "time_budget_ms must be positive");
  config_.sim.validate();
  sim_slots_ = std::make_unique<std::counting_semaphore<>>(config_.sim_workers);
}

void Service::load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Format, "cannot open model " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  auto [params, cfg] = deserialize(bytes);
  set_model(std::move(params), cfg, model_version_of(bytes));
}

void Service::set_model(ModelParams params, ModelConfig config, std::string version) {
  check_shapes(params, config);
  model_ = std::make_shared<const LoadedModel>(LoadedModel{std::move(params), config, std::move(version)});
}

HttpReply Service::predict(std::string_view body) const {
  ++requests_;
  const auto model = model_;
  if (!model) return fail(503, "no_model", "no model is loaded");
  const auto start = std::chrono::steady_clock::now();
  HttpReply err;
  const auto doc = parse_body(body, err);
  if (!doc) return err;
  Layout layout;
  try {
    layout = layout_from_json(*doc);
  } catch (const Error& e) {
    return layout_error(e);
  }
  try {
    const auto pred = roomroam::predict(model->params, model->config, layout_to_image(layout, model->config.image_size));
    json out = prediction_to_json(pred);
    out["model_version"] = model->version;
    out["latency_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return {200, out};
  } catch (const Error& e) {
    return fail(500, "internal", e.what(), e.detail());
  }
}

HttpReply Service::simulate(std::string_view body) {
  ++requests_;
  HttpReply err;
  const auto doc = parse_body(body, err);
  if (!doc) return err;
  if (!doc->is_object()) return fail(400, "schema", "request must be a JSON object", "$");
  if (!doc->contains("layout")) return fail(400, "schema", "missing field 'layout'", "layout");
  const auto& paths_v = doc->value("paths", json());
  if (!paths_v.is_number_integer()) return fail(400, "schema", "'paths' must be an integer", "paths");
  const auto paths = paths_v.get<long long>();
  if (paths < 1 || paths > config_.max_paths)
    return fail(400, "schema", "'paths' must be between 1 and " + std::to_string(config_.max_paths), "paths");
  std::uint64_t seed = 0;
  if (doc->contains("seed")) {
    const auto& s = (*doc)["seed"];
    if (!s.is_number_unsigned()) return fail(400, "schema", "'seed' must be a non-negative integer", "seed");
    seed = s.get<std::uint64_t>();
  }
  Layout layout;
  try {
    layout = layout_from_json((*doc)["layout"]);
  } catch (const Error& e) {
    auto r = layout_error(e);
    if (r.status == 400) r.body["detail"] = "layout." + r.body["detail"].get<std::string>();
    return r;
  }

  // Same seeding as record 0 of a CLI simulate run.
  const std::uint64_t estimate_seed = derive_seed(seed, 0);
  const auto budget = std::chrono::milliseconds(config_.time_budget_ms);
  const auto start = std::chrono::steady_clock::now();
  if (!sim_slots_->try_acquire_for(budget))
    return fail(504, "timeout", "no simulation worker became free within the time budget");
  struct Release {
    std::counting_semaphore<>& s;
    ~Release() { s.release(); }
  } release{*sim_slots_};

  EpisodeOptions opts;
  opts.deadline = start + budget;
  try {
    const auto est = estimate_resets(layout, config_.sim, static_cast<int>(paths), estimate_seed, opts);
    return {200, {{"per_path", est.per_path}, {"mean", est.mean}, {"std", est.std}}};
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Timeout)
      return fail(504, "timeout", "simulation exceeded the time budget of " + std::to_string(config_.time_budget_ms) + " ms",
                  e.detail());
    if (e.code() == ErrorCode::InfeasibleLayout) return fail(422, "infeasible_layout", e.what(), e.detail());
    return fail(422, "layout_invariant", e.what(), e.detail());
  }
}

HttpReply Service::catalog() const {
  json pieces = json::array();
  for (const auto& s : Catalog::standard().specs())
    pieces.push_back({{"kind", to_string(s.kind)}, {"width_m", 2.0 * s.half_extents.x}, {"depth_m", 2.0 * s.half_extents.y}});
  return {200, {{"pieces", pieces}}};
}

HttpReply Service::healthz() const {
  const auto model = model_;
  if (!model) return {503, {{"status", "no_model"}, {"model_version", nullptr}}};
  return {200, {{"status", "ok"}, {"model_version", model->version}}};
}

void Service::bind(httplib::Server& server) {
  server.set_default_headers({{"Access-Control-Allow-Origin", config_.cors_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  const auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Post("/api/predict", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, predict(req.body));
  });
  server.Post("/api/simulate", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, simulate(req.body));
  });
  server.Get("/api/catalog", [this, send](const httplib::Request&, httplib::Response& res) { send(res, catalog()); });
  server.Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) { send(res, healthz()); });
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.set_error_handler([send](const httplib::Request&, httplib::Response& res) {
    if (res.status == 404) send(res, fail(404, "not_found", "no such endpoint"));
  });
  server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "unknown error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send(res, fail(500, "internal", what));
  });
}

void run_server(Service& service, const std::string& host, int port) {
  httplib::Server server;
  service.bind(server);
  if (!server.listen(host, port)) throw Error(ErrorCode::Config, "cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace roomroam
