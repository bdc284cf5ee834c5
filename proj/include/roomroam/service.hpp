#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <semaphore>
#include <string>
#include <string_view>

#include <json.hpp>

#include "roomroam/layout.hpp"
#include "roomroam/model.hpp"
#include "roomroam/rdwsim.hpp"

namespace httplib {
class Server;
}

namespace roomroam {

struct ServiceConfig {
  int sim_workers = 2;         // concurrent /api/simulate jobs
  int time_budget_ms = 10000;  // per /api/simulate request
  int max_paths = 100;
  std::string cors_origin = "*";
  SimConfig sim;
};

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

// Structured error body shared by every endpoint.
nlohmann::json error_body(std::string_view code, std::string_view message, std::string_view detail = {});

// Short content hash of a model file, reported as model_version.
std::string model_version_of(std::string_view bytes);

// Prediction payload shared with the CLI: predicted_resets plus the heatmap as rows.
nlohmann::json prediction_to_json(const Prediction& prediction);

// Request handlers over an immutable model. Safe to call concurrently.
class Service {
 public:
  explicit Service(ServiceConfig config = {});

  void load_model(const std::filesystem::path& path);
  void set_model(ModelParams params, ModelConfig config, std::string version);
  bool has_model() const { return model_ != nullptr; }

  HttpReply predict(std::string_view body) const;
  HttpReply simulate(std::string_view body);
  HttpReply catalog() const;
  HttpReply healthz() const;

  // Registers the routes and CORS handling on an httplib server.
  void bind(httplib::Server& server);

  std::uint64_t requests_served() const { return requests_.load(); }

 private:
  struct LoadedModel {
    ModelParams params;
    ModelConfig config;
    std::string version;
  };

  ServiceConfig config_;
  std::shared_ptr<const LoadedModel> model_;
  std::unique_ptr<std::counting_semaphore<>> sim_slots_;
  mutable std::atomic<std::uint64_t> requests_{0};
};

// Blocks serving on host:port until the process is stopped.
void run_server(Service& service, const std::string& host, int port);

}  // namespace roomroam
