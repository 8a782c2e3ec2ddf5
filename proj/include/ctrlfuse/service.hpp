// SPDX-License-Identifier: Apache-2.0
//
// HTTP/1.1 JSON API over one checkpoint loaded in the background:
//
//   POST /v1/fuse    {ir, vis, mask?, alpha?, checkpoint?} -> fused image + masks
//   GET  /v1/health  {status: loading | ready | error}
//   GET  /v1/model   checkpoint id and config echo
//
// Images travel as base64 PNG. Response bodies depend only on the checkpoint
// and the request; wall time goes in the X-Elapsed-Ms header.
#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "ctrlfuse/model.hpp"

namespace httplib {
class Server;
}

namespace ctrlfuse {

struct HttpResult {
    int status = 200;
    std::string body;          // JSON
    double elapsed_ms = -1.0;  // forward time, reported out of band
};

/// Returns the model for a checkpoint id, or throws.
using ModelLoader = std::function<std::unique_ptr<CtrlFuseModel>(const std::string& id)>;

/// Loads `<dir>/<id>.cfck`.
ModelLoader checkpoint_dir_loader(const std::filesystem::path& dir);

/// Checkpoint ids are [A-Za-z0-9_.-]+ without a leading dot.
bool valid_checkpoint_id(const std::string& id);

class FusionService {
public:
    enum class State { loading, ready, error };

    FusionService(std::string checkpoint_id, ModelLoader loader);
    ~FusionService();

    FusionService(const FusionService&) = delete;
    FusionService& operator=(const FusionService&) = delete;

    /// Starts the background load; handlers answer 503 until it finishes.
    void start_loading();
    /// Blocks until the load has finished (either way).
    void wait_loaded();
    State state() const { return state_.load(); }
    const std::string& checkpoint_id() const { return id_; }

    HttpResult health() const;
    HttpResult model_info() const;
    HttpResult fuse(const std::string& body) const;

    /// Registers the routes (plus JSON 404s) on an httplib server.
    void mount(httplib::Server& server) const;

private:
    std::string id_;
    ModelLoader loader_;
    std::atomic<State> state_{State::loading};
    std::string load_error_;
    std::unique_ptr<CtrlFuseModel> model_;
    std::thread loader_thread_;
    std::once_flag started_;
};

/// Blocking server; returns when the process is told to stop or bind fails.
bool serve(FusionService& service, const std::string& host, int port);

}  // namespace ctrlfuse
