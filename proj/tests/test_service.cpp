// SPDX-License-Identifier: Apache-2.0
#include <condition_variable>
#include <filesystem>
#include <future>
#include <mutex>
#include <random>
#include <thread>

#include "ctrlfuse/checkpoint.hpp"
#include "ctrlfuse/image_io.hpp"
#include "ctrlfuse/service.hpp"
#include "ctrlfuse/synth.hpp"
#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "support/oracles.hpp"

using namespace ctrlfuse;
using nlohmann::json;

namespace {

std::string b64png(const Tensor& t) { return io::base64_encode(io::encode_png(t)); }

Tensor unpng(const std::string& b64, std::size_t channels = 1) {
    return io::decode_png(io::base64_decode(b64), channels);
}

struct Request {
    SynthScene scene = synth_scene(32, 11, 0);

    json body(std::optional<double> alpha, bool with_mask = true) const {
        json j{{"ir", b64png(scene.pair.ir)}, {"vis", b64png(scene.pair.vis)}};
        if (with_mask) j["mask"] = b64png(scene.mask(scene.objects()[0]).tensor());
        if (alpha) j["alpha"] = *alpha;
        return j;
    }
};

// One served checkpoint written to a scratch directory; the weights are
// moved off their seeded values so the file is the only source of truth.
class Fixture {
public:
    Fixture() : dir_(std::filesystem::temp_directory_path() / "ctrlfuse_service_test") {
        std::filesystem::create_directories(dir_);
        CtrlFuseModel model(ModelConfig::desk());
        std::mt19937_64 rng(5);
        std::normal_distribution<double> n(0.0, 0.01);
        for (auto t : model.params().trainable())
            for (double& v : t.mutable_data()) v += n(rng);
        save_checkpoint(make_checkpoint(model), dir_ / "desk.cfck");
    }
    ~Fixture() { std::filesystem::remove_all(dir_); }

    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
};

json parse(const HttpResult& r) { return json::parse(r.body); }

std::string error_code(const HttpResult& r) { return parse(r)["error"]["code"].get<std::string>(); }

}  // namespace

TEST_SUITE("service") {

TEST_CASE("checkpoint ids") {
    CHECK(valid_checkpoint_id("desk"));
    CHECK(valid_checkpoint_id("run-2.v1_a"));
    CHECK_FALSE(valid_checkpoint_id(""));
    CHECK_FALSE(valid_checkpoint_id(".hidden"));
    CHECK_FALSE(valid_checkpoint_id("../etc"));
    CHECK_FALSE(valid_checkpoint_id("a/b"));
}

TEST_CASE("handlers answer 503 while the checkpoint loads") {
    std::promise<void> release;
    std::shared_future<void> gate = release.get_future().share();
    FusionService svc("desk", [gate](const std::string&) {
        gate.wait();
        return std::make_unique<CtrlFuseModel>(ModelConfig::desk());
    });
    svc.start_loading();
    CHECK(parse(svc.health())["status"] == "loading");
    const Request req;
    const auto busy = svc.fuse(req.body(1.0).dump());
    CHECK(busy.status == 503);
    CHECK(error_code(busy) == "model_loading");
    CHECK(svc.model_info().status == 503);
    release.set_value();
    svc.wait_loaded();
    CHECK(parse(svc.health())["status"] == "ready");
    CHECK(svc.fuse(req.body(1.0).dump()).status == 200);
}

TEST_CASE("a failed load keeps answering 503") {
    Fixture fx;
    FusionService svc("absent", checkpoint_dir_loader(fx.dir()));
    svc.wait_loaded();
    CHECK(svc.state() == FusionService::State::error);
    CHECK(parse(svc.health())["status"] == "error");
    const auto r = svc.fuse(Request{}.body(1.0).dump());
    CHECK(r.status == 503);
    CHECK(error_code(r) == "model_unavailable");
}

TEST_CASE("fuse contract in process") {
    Fixture fx;
    FusionService svc("desk", checkpoint_dir_loader(fx.dir()));
    svc.wait_loaded();
    REQUIRE(svc.state() == FusionService::State::ready);
    const Request req;

    const auto info = parse(svc.model_info());
    CHECK(info["n_queries"] == 40);
    CHECK(info["channels"] == 16);
    CHECK(info["seed"] == ModelConfig::desk().seed());

    const auto a1 = svc.fuse(req.body(1.0).dump());
    REQUIRE(a1.status == 200);
    CHECK(a1.elapsed_ms >= 0.0);
    const auto j1 = parse(a1);
    CHECK(j1["prompted"] == true);
    CHECK(j1["width"] == 32);
    for (const char* k : {"fused", "m_ir", "m_vis", "seg"}) CHECK(unpng(j1[k]).shape() == ad::Shape{1, 32, 32});
    CHECK(j1["metrics"].contains("qabf"));

    SUBCASE("repeat requests are byte-identical") {
        CHECK(svc.fuse(req.body(1.0).dump()).body == a1.body);
    }
    SUBCASE("alpha zero equals the prompt-free path") {
        const auto zero = parse(svc.fuse(req.body(0.0).dump()));
        const auto bare = parse(svc.fuse(req.body(std::nullopt, false).dump()));
        CHECK(bare["prompted"] == false);
        CHECK(bare["alpha"] == 0.0);
        CHECK(zero["fused"] == bare["fused"]);
    }
    SUBCASE("prompt scaling changes the fused image") {
        const auto five = parse(svc.fuse(req.body(5.0).dump()));
        CHECK(oracle::linf(unpng(five["fused"]), unpng(j1["fused"])) > 0.0);
    }
    SUBCASE("absent alpha defaults to one") {
        CHECK(svc.fuse(req.body(std::nullopt).dump()).body == a1.body);
    }
}

TEST_CASE("error table") {
    Fixture fx;
    FusionService svc("desk", checkpoint_dir_loader(fx.dir()));
    svc.wait_loaded();
    const Request req;
    const auto expect = [&](const std::string& body, int status, const std::string& code) {
        const auto r = svc.fuse(body);
        CAPTURE(body.substr(0, 80));
        CHECK(r.status == status);
        CHECK(error_code(r) == code);
    };
    expect("{not json", 400, "invalid_json");
    expect("[1, 2]", 400, "invalid_json");

    auto j = req.body(1.0);
    j.erase("ir");
    expect(j.dump(), 400, "missing_field");
    j = req.body(1.0);
    j["vis"] = 7;
    expect(j.dump(), 400, "invalid_field");
    j = req.body(1.0);
    j["ir"] = "@@not base64@@";
    expect(j.dump(), 400, "invalid_base64");
    j = req.body(1.0);
    j["ir"] = io::base64_encode({1, 2, 3, 4});
    expect(j.dump(), 400, "invalid_png");
    j = req.body(1.0);
    j["alpha"] = -1.0;
    expect(j.dump(), 400, "invalid_alpha");
    j["alpha"] = "big";
    expect(j.dump(), 400, "invalid_alpha");
    j = req.body(1.0);
    j["ir"] = b64png(Tensor::zeros({1, 16, 16}));
    expect(j.dump(), 400, "size_mismatch");
    j = req.body(1.0);
    j["mask"] = b64png(Tensor::zeros({1, 16, 16}));
    expect(j.dump(), 400, "size_mismatch");
    j = req.body(1.0, false);
    j["ir"] = b64png(Tensor::zeros({1, 30, 30}));
    j["vis"] = b64png(Tensor::zeros({3, 30, 30}));
    expect(j.dump(), 400, "size_not_divisible");
    j = req.body(1.0);
    j["checkpoint"] = "other";
    expect(j.dump(), 404, "unknown_checkpoint");
    j["checkpoint"] = "desk";
    CHECK(svc.fuse(j.dump()).status == 200);
}

TEST_CASE("over the wire") {
    Fixture fx;
    FusionService svc("desk", checkpoint_dir_loader(fx.dir()));
    svc.wait_loaded();
    httplib::Server server;
    svc.mount(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client cli("127.0.0.1", port);
    const auto health = cli.Get("/v1/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(json::parse(health->body)["status"] == "ready");
    CHECK(json::parse(cli.Get("/v1/model")->body)["n_queries"] == 40);

    const auto missing = cli.Get("/v1/nothing");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    CHECK(json::parse(missing->body)["error"]["code"] == "not_found");

    const Request req;
    const std::string body = req.body(2.0).dump();
    const auto first = cli.Post("/v1/fuse", body, "application/json");
    REQUIRE(first);
    CHECK(first->status == 200);
    CHECK(first->has_header("X-Elapsed-Ms"));
    CHECK(first->body == svc.fuse(body).body);

    // Concurrent identical requests share the immutable model.
    std::vector<std::future<std::string>> replies;
    for (int i = 0; i < 4; ++i)
        replies.push_back(std::async(std::launch::async, [&] {
            httplib::Client c("127.0.0.1", port);
            const auto r = c.Post("/v1/fuse", body, "application/json");
            return r ? r->body : std::string();
        }));
    for (auto& f : replies) CHECK(f.get() == first->body);

    const auto zero = cli.Post("/v1/fuse", req.body(0.0).dump(), "application/json");
    const auto bare = cli.Post("/v1/fuse", req.body(std::nullopt, false).dump(), "application/json");
    CHECK(json::parse(zero->body)["fused"] == json::parse(bare->body)["fused"]);

    const auto bad = cli.Post("/v1/fuse", "{", "application/json");
    CHECK(bad->status == 400);

    server.stop();
    th.join();
}

}
