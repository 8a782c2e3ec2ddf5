// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/service.hpp"

#include <chrono>
#include <cmath>
#include <optional>

#include "ctrlfuse/checkpoint.hpp"
#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/image_io.hpp"
#include "ctrlfuse/metrics.hpp"
#include "httplib.h"
#include "json.hpp"

namespace ctrlfuse {

using nlohmann::ordered_json;

namespace {

HttpResult error(int status, const std::string& code, const std::string& message) {
    ordered_json j;
    j["error"] = {{"code", code}, {"message", message}};
    return {status, j.dump()};
}

HttpResult ok(const ordered_json& j) { return {200, j.dump()}; }

// Client-side failures carry their HTTP error code.
struct RequestError {
    std::string code;
    std::string message;
};

std::string require_string(const nlohmann::json& j, const char* field) {
    if (!j.contains(field)) throw RequestError{"missing_field", std::string("missing field '") + field + "'"};
    if (!j[field].is_string())
        throw RequestError{"invalid_field", std::string("field '") + field + "' must be a string"};
    return j[field].get<std::string>();
}

Tensor decode_image(const std::string& b64, std::size_t channels, const char* field) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = io::base64_decode(b64);
    } catch (const FormatError& e) {
        throw RequestError{"invalid_base64", std::string(field) + ": " + e.what()};
    }
    try {
        return io::decode_png(bytes, channels);
    } catch (const FormatError& e) {
        throw RequestError{"invalid_png", std::string(field) + ": " + e.what()};
    }
}

std::string png_b64(const Tensor& t) { return io::base64_encode(io::encode_png(t)); }

}  // namespace

bool valid_checkpoint_id(const std::string& id) {
    if (id.empty() || id.size() > 128 || id.front() == '.') return false;
    for (const char c : id)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
    return true;
}

ModelLoader checkpoint_dir_loader(const std::filesystem::path& dir) {
    return [dir](const std::string& id) {
        if (!valid_checkpoint_id(id)) throw ConfigError("invalid checkpoint id '" + id + "'");
        return restore_model(load_checkpoint(dir / (id + ".cfck")));
    };
}

FusionService::FusionService(std::string checkpoint_id, ModelLoader loader)
    : id_(std::move(checkpoint_id)), loader_(std::move(loader)) {}

FusionService::~FusionService() {
    if (loader_thread_.joinable()) loader_thread_.join();
}

void FusionService::start_loading() {
    std::call_once(started_, [this] {
        loader_thread_ = std::thread([this] {
            try {
                model_ = loader_(id_);
                state_.store(State::ready);
            } catch (const std::exception& e) {
                load_error_ = e.what();
                state_.store(State::error);
            }
        });
    });
}

void FusionService::wait_loaded() {
    start_loading();
    if (loader_thread_.joinable()) loader_thread_.join();
}

HttpResult FusionService::health() const {
    ordered_json j;
    switch (state_.load()) {
        case State::loading: j["status"] = "loading"; break;
        case State::ready: j["status"] = "ready"; break;
        case State::error:
            j["status"] = "error";
            j["message"] = load_error_;
            break;
    }
    j["checkpoint"] = id_;
    return ok(j);
}

HttpResult FusionService::model_info() const {
    const State s = state_.load();
    if (s == State::loading) return error(503, "model_loading", "checkpoint is still loading");
    if (s == State::error) return error(503, "model_unavailable", load_error_);
    const ModelConfig& cfg = model_->config();
    ordered_json j;
    j["checkpoint"] = id_;
    j["n_queries"] = cfg.n_queries;
    j["channels"] = cfg.backbone.enc_channels;
    j["seed"] = cfg.seed();
    j["config"] = to_json(cfg);
    return ok(j);
}

HttpResult FusionService::fuse(const std::string& body) const {
    const State s = state_.load();
    if (s == State::loading) return error(503, "model_loading", "checkpoint is still loading");
    if (s == State::error) return error(503, "model_unavailable", load_error_);

    try {
        nlohmann::json req;
        try {
            req = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            throw RequestError{"invalid_json", e.what()};
        }
        if (!req.is_object()) throw RequestError{"invalid_json", "request body must be a JSON object"};

        if (req.contains("checkpoint")) {
            if (!req["checkpoint"].is_string())
                throw RequestError{"invalid_field", "field 'checkpoint' must be a string"};
            const auto id = req["checkpoint"].get<std::string>();
            if (id != id_) return error(404, "unknown_checkpoint", "checkpoint '" + id + "' is not served here");
        }

        double alpha = 1.0;
        if (req.contains("alpha")) {
            if (!req["alpha"].is_number()) throw RequestError{"invalid_alpha", "alpha must be a number"};
            alpha = req["alpha"].get<double>();
            if (!std::isfinite(alpha) || alpha < 0.0)
                throw RequestError{"invalid_alpha", "alpha must be finite and >= 0"};
        }

        ImagePair pair;
        pair.ir = decode_image(require_string(req, "ir"), 1, "ir");
        pair.vis = decode_image(require_string(req, "vis"), 3, "vis");
        const std::size_t h = pair.ir.dim(1), w = pair.ir.dim(2);
        if (pair.vis.dim(1) != h || pair.vis.dim(2) != w)
            throw RequestError{"size_mismatch", "ir and vis images differ in size"};
        if (h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0)
            throw RequestError{"size_not_divisible", "image sides must be positive multiples of 4"};

        std::optional<PromptMask> prompt;
        if (req.contains("mask") && !req["mask"].is_null()) {
            const Tensor m = decode_image(require_string(req, "mask"), 1, "mask");
            if (m.dim(1) != h || m.dim(2) != w)
                throw RequestError{"size_mismatch", "mask size differs from the images"};
            prompt = PromptMask::from_values(h, w, m.data());
        }

        const auto t0 = std::chrono::steady_clock::now();
        ad::NoGradGuard no_grad;
        const ForwardResult r = model_->forward(pair, prompt, IntensityControl{alpha});
        const auto report = metrics::MetricReport::evaluate(r.i_f, pair.ir, luminance(pair.vis));
        const double elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

        ordered_json j;
        j["checkpoint"] = id_;
        j["alpha"] = prompt ? alpha : 0.0;
        j["prompted"] = prompt.has_value();
        j["width"] = w;
        j["height"] = h;
        j["fused"] = png_b64(r.i_f);
        j["m_ir"] = r.m_ir.defined() ? ordered_json(png_b64(r.m_ir)) : ordered_json(nullptr);
        j["m_vis"] = r.m_vis.defined() ? ordered_json(png_b64(r.m_vis)) : ordered_json(nullptr);
        j["seg"] = png_b64(r.i_seg);
        j["metrics"] = {{"mse", report.mse},   {"psnr", report.psnr}, {"qabf", report.qabf},
                        {"nabf", report.nabf}, {"ssim", report.ssim}, {"scd", report.scd}};
        HttpResult res = ok(j);
        res.elapsed_ms = elapsed;
        return res;
    } catch (const RequestError& e) {
        return error(400, e.code, e.message);
    } catch (const Error& e) {
        return error(400, "invalid_request", e.what());
    }
}

void FusionService::mount(httplib::Server& server) const {
    auto send = [](httplib::Response& res, const HttpResult& r) {
        res.status = r.status;
        if (r.elapsed_ms >= 0.0) res.set_header("X-Elapsed-Ms", std::to_string(r.elapsed_ms));
        res.set_content(r.body, "application/json");
    };
    server.Get("/v1/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    server.Get("/v1/model", [this, send](const httplib::Request&, httplib::Response& res) { send(res, model_info()); });
    server.Post("/v1/fuse",
                [this, send](const httplib::Request& req, httplib::Response& res) { send(res, fuse(req.body)); });
    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
        const HttpResult r = res.status == 404 ? error(404, "not_found", "no route for " + req.method + " " + req.path)
                                               : error(res.status, "http_error", "request failed");
        res.set_content(r.body, "application/json");
        return httplib::Server::HandlerResponse::Handled;
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string msg = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            msg = e.what();
        } catch (...) {
        }
        res.status = 500;
        res.set_content(error(500, "internal", msg).body, "application/json");
    });
}

bool serve(FusionService& service, const std::string& host, int port) {
    httplib::Server server;
    service.mount(server);
    service.start_loading();
    return server.listen(host, port);
}

}  // namespace ctrlfuse
