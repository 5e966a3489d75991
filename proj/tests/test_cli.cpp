#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = 0;
    std::string out, err;
};

Result cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    Result r;
    r.code = emocap::cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path scratch() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "emocap_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string path(const std::string& name) { return (scratch() / name).string(); }

std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines_of(const std::string& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

void write(const std::string& p, const std::string& text) { std::ofstream(p) << text; }

const std::vector<std::string> kSmallData{"--classes", "3", "--per-class", "8", "--patches", "3",
                                          "--features", "6", "--locals-min", "1", "--locals-max", "3"};
const std::vector<std::string> kSmallTrain{"--epochs", "2", "--batch-size", "6", "--embed", "8",
                                           "--token-width", "8", "-q"};

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

const std::string& small_dataset() {
    static const std::string p = [] {
        auto p = path("small.jsonl");
        REQUIRE(cli(std::vector<std::string>{"gen-data", "--seed", "1", "-o", p} + kSmallData).code == 0);
        return p;
    }();
    return p;
}

const std::string& small_checkpoint() {
    static const std::string p = [] {
        auto p = path("small.emcp");
        REQUIRE(cli(std::vector<std::string>{"train", "-d", small_dataset(), "--seed", "1", "-o", p} + kSmallTrain)
                    .code == 0);
        return p;
    }();
    return p;
}

} // namespace

TEST_CASE("gen-data writes the requested corpus") {
    auto p = path("d.jsonl");
    auto r = cli({"gen-data", "--classes", "8", "--per-class", "32", "--seed", "1", "-o", p});
    REQUIRE(r.code == 0);
    CHECK(lines_of(p).size() == 256);
    auto summary = json::parse(r.out);
    CHECK(summary["records"] == 256);
    CHECK(summary["per_class"]["happiness"] == 32);
    CHECK(summary["per_class"].size() == 8);
    auto echo = json::parse(slurp(p + ".config.json"));
    CHECK(echo["data"]["seed"] == 1);
    CHECK(echo["data"]["per_class"] == 32);

    auto again = path("d2.jsonl");
    REQUIRE(cli({"gen-data", "--classes", "8", "--per-class", "32", "--seed", "1", "-o", again}).code == 0);
    CHECK(slurp(p) == slurp(again));
}

TEST_CASE("gen-data usage errors exit 2") {
    auto missing = cli({"gen-data", "--classes", "8", "--seed", "1"});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("missing output path") != std::string::npos);
    CHECK(missing.err.find("Usage") != std::string::npos);
    CHECK(cli({"gen-data", "-o", path("noseed.jsonl")}).code == 2);
    CHECK(cli({"gen-data", "--seed", "1", "--classes", "1", "-o", path("bad.jsonl")}).code == 2);
    CHECK(cli({"gen-data", "--seed", "1", "--bogus", "-o", path("bad.jsonl")}).code == 2);
    CHECK(cli({}).code == 2);
    CHECK(cli({"gen-data", "--seed", "1", "-o", path("no/such/dir/d.jsonl")}).code == 3);
}

TEST_CASE("config file: unknown keys rejected, flags override") {
    auto cfg = path("run.json");
    write(cfg, R"({"data": {"classes": 3, "per_class": 5, "seed": 4}, "paths": {"output": ")" +
                   path("from_config.jsonl") + R"("}})");
    REQUIRE(cli({"gen-data", "--config", cfg}).code == 0);
    CHECK(lines_of(path("from_config.jsonl")).size() == 15);
    REQUIRE(cli({"gen-data", "--config", cfg, "--per-class", "2"}).code == 0);
    CHECK(lines_of(path("from_config.jsonl")).size() == 6);

    write(cfg, R"({"data": {"classes": 3, "colour": 1}})");
    auto r = cli({"gen-data", "--config", cfg, "--seed", "1", "-o", path("x.jsonl")});
    CHECK(r.code == 2);
    CHECK(r.err.find("colour") != std::string::npos);
    write(cfg, R"({"extras": {}})");
    CHECK(cli({"gen-data", "--config", cfg, "--seed", "1", "-o", path("x.jsonl")}).code == 2);
    write(cfg, R"({"train": {"sigma": 1.5}})");
    CHECK(cli(std::vector<std::string>{"train", "--config", cfg, "-d", small_dataset(), "--seed", "1", "-o",
                                       path("x.emcp")} + kSmallTrain)
              .code == 2);
    write(cfg, "{not json");
    CHECK(cli({"gen-data", "--config", cfg}).code == 2);
    CHECK(cli({"gen-data", "--config", path("absent.json")}).code == 3);
}

TEST_CASE("train is deterministic and echoes its config") {
    auto a = path("a.emcp"), b = path("b.emcp");
    auto ra = cli(std::vector<std::string>{"train", "-d", small_dataset(), "--seed", "1", "-o", a} + kSmallTrain);
    auto rb = cli(std::vector<std::string>{"train", "-d", small_dataset(), "--seed", "1", "-o", b} + kSmallTrain);
    REQUIRE(ra.code == 0);
    REQUIRE(rb.code == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(slurp(a + ".history.jsonl") == slurp(b + ".history.jsonl"));
    auto summary = json::parse(ra.out);
    CHECK(summary["epochs"] == 2);
    CHECK(summary["config"]["batch_size"] == 6);
    CHECK(summary["config"]["patches"] == 3);
    CHECK(summary["final"].contains("intra"));
    auto history = lines_of(a + ".history.jsonl");
    REQUIRE(history.size() == 3);
    CHECK(json::parse(history[0])["config"]["seed"] == 1);

    CHECK(cli(std::vector<std::string>{"train", "-d", small_dataset(), "-o", a} + kSmallTrain).code == 2);
    CHECK(cli(std::vector<std::string>{"train", "--seed", "1", "-o", a} + kSmallTrain).code == 2);
    CHECK(cli(std::vector<std::string>{"train", "-d", path("absent.jsonl"), "--seed", "1", "-o", a} + kSmallTrain)
              .code == 3);
    CHECK(cli(std::vector<std::string>{"train", "-d", small_dataset(), "--seed", "1", "-o", a, "--batch-size",
                                       "100", "-q"})
              .code == 2);
}

TEST_CASE("train with --alpha 0 optimizes the global column only") {
    auto p = path("alpha0.emcp");
    REQUIRE(cli(std::vector<std::string>{"train", "-d", small_dataset(), "--seed", "1", "-o", p, "--alpha", "0"} +
                kSmallTrain)
                .code == 0);
    auto history = lines_of(p + ".history.jsonl");
    for (std::size_t i = 1; i < history.size(); ++i) {
        auto e = json::parse(history[i]);
        CHECK(e["total"] == e["global"]);
        CHECK(e["intra"].get<double>() > 0.0);
        CHECK(e["inter"].get<double>() > 0.0);
    }
}

TEST_CASE("train reports a non-finite loss with exit 4") {
    auto lines = lines_of(small_dataset());
    auto rec = json::parse(lines[2]);
    for (auto& row : rec["patches"])
        for (auto& v : row) v = 1.7e308;
    lines[2] = rec.dump();
    auto bad = path("overflow.jsonl");
    std::ofstream out(bad);
    for (const auto& l : lines) out << l << '\n';
    out.close();
    auto r = cli(std::vector<std::string>{"train", "-d", bad, "--seed", "1", "-o", path("nan.emcp")} + kSmallTrain);
    CHECK(r.code == 4);
    CHECK(r.err.find("epoch") != std::string::npos);
    CHECK(r.err.find("batch") != std::string::npos);
}

TEST_CASE("EMOCAP_PRECISION selects the arithmetic") {
    auto p = path("f32.emcp");
    setenv("EMOCAP_PRECISION", "f32", 1);
    auto r = cli(std::vector<std::string>{"train", "-d", small_dataset(), "--seed", "1", "-o", p} + kSmallTrain);
    setenv("EMOCAP_PRECISION", "f16", 1);
    auto bad = cli(std::vector<std::string>{"train", "-d", small_dataset(), "--seed", "1", "-o", p} + kSmallTrain);
    unsetenv("EMOCAP_PRECISION");
    REQUIRE(r.code == 0);
    CHECK(json::parse(r.out)["config"]["precision"] == "f32");
    CHECK(bad.code == 2);
}

TEST_CASE("eval zero-shot, video pooling and retrieval") {
    auto zs = cli({"eval", "zero-shot", "-c", small_checkpoint(), "-d", small_dataset()});
    REQUIRE(zs.code == 0);
    auto report = json::parse(zs.out);
    CHECK(report["mode"] == "zero-shot");
    CHECK(report["count"] == 24);
    CHECK(report["confusion"].size() == 3);
    CHECK(report["config"]["train"]["seed"] == 1);
    CHECK(report["config"]["eval"]["class_names"][0] == "happiness");

    // Every record its own clip: video mode must reproduce image mode.
    auto grouped = path("grouped.jsonl");
    REQUIRE(cli(std::vector<std::string>{"gen-data", "--seed", "1", "--frames-per-group", "1", "-o", grouped} +
                kSmallData)
                .code == 0);
    auto image = json::parse(cli({"eval", "zero-shot", "-c", small_checkpoint(), "-d", grouped}).out);
    auto video = json::parse(cli({"eval", "zero-shot", "--video", "-c", small_checkpoint(), "-d", grouped}).out);
    CHECK(image["war"] == video["war"]);
    CHECK(image["uar"] == video["uar"]);
    CHECK(image["confusion"] == video["confusion"]);
    CHECK(video["config"]["eval"]["video"] == true);

    auto named = cli({"eval", "zero-shot", "-c", small_checkpoint(), "-d", small_dataset(), "--class-names", "a,b"});
    CHECK(named.code == 2);

    auto ret = cli({"eval", "retrieval", "-c", small_checkpoint(), "-d", small_dataset()});
    REQUIRE(ret.code == 0);
    auto rr = json::parse(ret.out);
    for (const char* dir : {"image_to_text", "text_to_image"}) {
        CHECK(rr["recall_at"][dir].size() == 3);
        CHECK(rr["recall_at"][dir]["1"].get<double>() <= rr["recall_at"][dir]["10"].get<double>());
    }
    CHECK(cli({"eval", "retrieval", "-c", path("absent.emcp"), "-d", small_dataset()}).code == 3);
    CHECK(cli({"eval", "-c", small_checkpoint()}).code == 2);
}

TEST_CASE("eval probe is seeded") {
    std::vector<std::string> args{"eval", "probe", "-c", small_checkpoint(), "-d", small_dataset(), "--shots", "2"};
    CHECK(cli(args).code == 2);
    auto a = cli(args + std::vector<std::string>{"--seed", "3"});
    auto b = cli(args + std::vector<std::string>{"--seed", "3"});
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    auto report = json::parse(a.out);
    CHECK(report["mode"] == "probe");
    CHECK(report["count"] == 12);
    CHECK(cli({"eval", "probe", "-c", small_checkpoint(), "-d", small_dataset(), "--shots", "7", "--seed", "3"})
              .code == 2);
}

TEST_CASE("gradcheck command") {
    auto r = cli({"gradcheck"});
    REQUIRE(r.code == 0);
    auto report = json::parse(r.out);
    CHECK(report["max_relative_error"].size() == 6);
    for (auto& [name, err] : report["max_relative_error"].items()) {
        INFO(name);
        CHECK(err.get<double>() < 1e-6);
    }
    auto a = cli({"gradcheck", "--seed", "99"});
    auto b = cli({"gradcheck", "--seed", "99"});
    CHECK(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(json::parse(a.out)["seed"] == 99);
    auto fault = cli({"gradcheck", "--inject-fault"});
    CHECK(fault.code == 1);
    CHECK(json::parse(fault.out)["pass"] == false);
}
