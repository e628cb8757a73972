#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "r2d/cli.hpp"
#include "r2d/losses.hpp"
#include "r2d/response.hpp"

using namespace r2d;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::string kGolden = R2D_SOURCE_DIR "/tests/golden/";

struct CliRun {
    int code = 0;
    std::string out;
    std::string err;
};

CliRun cli(const std::vector<std::string>& args) {
    std::ostringstream out;
    std::ostringstream err;
    CliRun r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("r2d_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write(const fs::path& p, const std::string& text) {
    std::ofstream(p) << text;
    return p;
}

// Small world so simulate runs finish quickly.
std::vector<std::string> quick_sim(std::vector<std::string> extra) {
    std::vector<std::string> a{"simulate", "--classes", "4", "--class-dim", "8", "--train-scenes", "10",
                               "--eval-scenes", "8", "--epochs", "3"};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
}

}  // namespace

TEST(CliQuality, AllZeroLogitsGiveOneHalf) {
    const fs::path dir = scratch("zero");
    ResponseBundle b;
    b.grid.levels = {{3, 2, 8.0}};
    b.cls.num_classes = 4;
    b.cls.logits.assign(6 * 4, 0.0);
    b.reg.bins = 5;
    b.reg.logits.assign(6 * kEdges * 5, 0.0);
    save_bundle(b, dir / "zero.json");
    const CliRun r = cli({"quality", (dir / "zero.json").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json j = json::parse(r.out);
    ASSERT_EQ(j["q_cls"].size(), 6u);
    for (const auto& v : j["q_cls"]) {
        EXPECT_EQ(v.get<double>(), 0.5);
    }
}

TEST(CliQuality, CorruptJsonExitsTwoNamingByte) {
    const fs::path dir = scratch("corrupt");
    const CliRun r = cli({"quality", write(dir / "bad.json", "{\"grid\": [1, 2,, 3]}").string()});
    EXPECT_EQ(r.code, kExitParse);
    EXPECT_NE(r.err.find("byte 16"), std::string::npos) << r.err;
    EXPECT_EQ(cli({"quality", (dir / "missing.json").string()}).code, kExitParse);
}

TEST(CliQuality, GoldenCsvByteForByte) {
    const CliRun r = cli({"--format", "csv", "quality", kGolden + "teacher.json"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(r.out, read_file(kGolden + "quality.csv"));
}

TEST(CliRegions, GoldenPartition) {
    const CliRun r = cli({"regions", kGolden + "teacher.json"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(r.out, read_file(kGolden + "regions.json"));
}

TEST(CliRegions, ThetaExtremes) {
    const json none = json::parse(cli({"regions", kGolden + "teacher.json", "--theta", "1.0"}).out);
    EXPECT_TRUE(none["cls"]["candidates"].empty());
    EXPECT_TRUE(none["cls"]["high"].empty());
    EXPECT_TRUE(none["cls"]["low"].empty());
    EXPECT_TRUE(none["nms"]["high"].empty());
    const json all = json::parse(cli({"regions", kGolden + "teacher.json", "--theta", "0"}).out);
    const ResponseBundle t = load_bundle(kGolden + "teacher.json");
    EXPECT_EQ(all["cls"]["candidates"].size(), t.node_count());
}

TEST(CliRegions, RasterFilesWritten) {
    const fs::path dir = scratch("raster");
    ASSERT_EQ(cli({"regions", kGolden + "teacher.json", "--raster", dir.string()}).code, kExitOk);
    EXPECT_TRUE(fs::exists(dir / "cls_level0.csv"));
    EXPECT_TRUE(fs::exists(dir / "reg_level0.csv"));
    const ResponseBundle t = load_bundle(kGolden + "teacher.json");
    const std::string text = read_file(dir / "cls_level0.csv");
    EXPECT_EQ(static_cast<int>(std::count(text.begin(), text.end(), '\n')), t.grid.levels[0].height);
}

TEST(CliLoss, SelfDistillationIsZero) {
    const CliRun r = cli({"loss", kGolden + "teacher.json", kGolden + "teacher.json"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json j = json::parse(r.out);
    for (const char* k : {"L_max_cls_H", "L_not_max_cls_H", "L_cls_H", "L_cls_L", "L_cls_distill", "L_reg_H",
                          "L_reg_L", "L_reg_distill", "L_distill_total"}) {
        EXPECT_LT(std::abs(j[k].get<double>()), 1e-12) << k;
    }
}

TEST(CliLoss, GradcheckOnGoldenFixture) {
    const CliRun r = cli({"loss", kGolden + "teacher.json", kGolden + "student.json", "--gradcheck"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json j = json::parse(r.out);
    EXPECT_LT(j["gradcheck"]["max_rel_error"].get<double>(), 1e-6);
    EXPECT_GT(j["L_distill_total"].get<double>(), 0.0);
}

TEST(CliLoss, RegressionWeightsMaskLocalization) {
    const CliRun r = cli({"loss", kGolden + "teacher.json", kGolden + "student.json", "--lambda5", "0", "--lambda6", "0"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json j = json::parse(r.out);
    EXPECT_EQ(j["L_reg_distill"].get<double>(), 0.0);
    EXPECT_EQ(j["L_distill_total"].get<double>(), j["L_cls_distill"].get<double>());
}

TEST(CliLoss, MisalignedExitsThree) {
    const fs::path dir = scratch("misaligned");
    ResponseBundle s = load_bundle(kGolden + "student.json");
    s.grid.levels[0].width -= 1;
    s.cls.logits.resize(s.grid.node_count() * s.cls.num_classes);
    s.reg.logits.resize(s.grid.node_count() * s.reg.node_stride());
    save_bundle(s, dir / "s.json");
    const CliRun r = cli({"loss", kGolden + "teacher.json", (dir / "s.json").string()});
    EXPECT_EQ(r.code, kExitMisaligned) << r.err;
    EXPECT_NE(r.err.find("misaligned detectors"), std::string::npos) << r.err;
}

TEST(CliLoss, CsvFormat) {
    const CliRun r = cli({"--format", "csv", "loss", kGolden + "teacher.json", kGolden + "student.json"});
    ASSERT_EQ(r.code, kExitOk);
    EXPECT_EQ(r.out.substr(0, r.out.find('\n')), report_csv_header());
}

TEST(CliSimulate, JointSingleStep) {
    const CliRun r = cli(quick_sim({"--protocol", "joint", "--steps", "1"}));
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json j = json::parse(r.out);
    ASSERT_EQ(j.size(), 1u);
    EXPECT_EQ(j[0]["protocol"], "joint");
    EXPECT_EQ(j[0]["step"], 0);
    EXPECT_EQ(j[0]["group"], 0);
}

TEST(CliSimulate, RepeatedRunsIdenticalAndJobsIrrelevant) {
    const CliRun a = cli(quick_sim({"--compare", "--steps", "2", "--seed", "3"}));
    const CliRun b = cli(quick_sim({"--compare", "--steps", "2", "--seed", "3"}));
    const CliRun c = cli(quick_sim({"--compare", "--steps", "2", "--seed", "3", "--jobs", "3"}));
    ASSERT_EQ(a.code, kExitOk) << a.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(a.out, c.out);
    const json j = json::parse(a.out);
    EXPECT_TRUE(j.contains("joint") && j.contains("finetune") && j.contains("r2d"));
}

TEST(CliSimulate, SeedFallsBackToEnvironment) {
    const CliRun flag = cli(quick_sim({"--steps", "2", "--seed", "41"}));
    ::setenv("R2D_SEED", "41", 1);
    const CliRun env = cli(quick_sim({"--steps", "2"}));
    ::setenv("R2D_SEED", "not-a-number", 1);
    const CliRun bad = cli(quick_sim({"--steps", "2"}));
    ::unsetenv("R2D_SEED");
    const CliRun plain = cli(quick_sim({"--steps", "2"}));
    EXPECT_EQ(flag.out, env.out);
    EXPECT_NE(flag.out, plain.out);
    EXPECT_EQ(bad.code, kExitParse);
}

TEST(CliSimulate, DivergenceExitsFourWithContext) {
    const CliRun r = cli(quick_sim({"--steps", "2", "--lr", "1e6"}));
    EXPECT_EQ(r.code, kExitDivergence);
    EXPECT_NE(r.err.find("step 1"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("epoch"), std::string::npos) << r.err;
}

TEST(CliSplit, ThreeAndFiveStepSpecs) {
    const std::vector<std::pair<std::string, std::vector<std::size_t>>> cases{
        {"three_step", {15, 17, 18}}, {"five_step", {15, 9, 8, 10, 8}}};
    for (const auto& [name, sizes] : cases) {
        const fs::path dir = scratch("split_" + name);
        const CliRun r = cli({"--out", dir.string(), "split", R2D_SOURCE_DIR "/data/specs/" + name + ".json"});
        ASSERT_EQ(r.code, kExitOk) << r.err;
        const json m = json::parse(r.out);
        ASSERT_EQ(m["steps"].size(), sizes.size());
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            const json step = json::parse(read_file(dir / m["steps"][k]["path"].get<std::string>()));
            EXPECT_EQ(step["categories"].size(), sizes[k]);
        }
    }
}

TEST(CliSplit, SingleStepIsIdentity) {
    const fs::path dir = scratch("split_identity");
    std::string classes;
    for (int c = 1; c <= 14; ++c) {
        classes += (c > 1 ? "," : "") + std::to_string(c);
    }
    const fs::path spec = write(dir / "one.json", "{\"name\": \"one\", \"steps\": [[" + classes + "]], \"source\": \"" +
                                                      R2D_SOURCE_DIR "/data/toy_volleyball_14.json\"}");
    const CliRun r = cli({"--out", (dir / "out").string(), "split", spec.string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json src = json::parse(read_file(R2D_SOURCE_DIR "/data/toy_volleyball_14.json"));
    EXPECT_EQ(json::parse(r.out)["steps"][0]["annotations"].get<std::size_t>(), src["annotations"].size());
}

TEST(CliSplit, UnknownClassExitsFive) {
    const fs::path dir = scratch("split_bad");
    const fs::path spec = write(dir / "bad.json", "{\"name\": \"bad\", \"steps\": [[1, 2], [99]], \"source\": \"" +
                                                      std::string(R2D_SOURCE_DIR "/data/toy_volleyball_14.json\"}"));
    const CliRun r = cli({"--out", (dir / "out").string(), "split", spec.string()});
    EXPECT_EQ(r.code, kExitSpec);
    EXPECT_NE(r.err.find("99"), std::string::npos) << r.err;
}

TEST(CliSelfTest, DefaultsMatchReference) {
    const CliRun r = cli({"self-test"});
    EXPECT_EQ(r.code, kExitOk);
    EXPECT_TRUE(json::parse(r.out)["pass"].get<bool>());
}

TEST(CliUsage, BadArgumentsExitTwo) {
    EXPECT_EQ(cli({"quality"}).code, kExitParse);
    EXPECT_EQ(cli({"--format", "xml", "self-test"}).code, kExitParse);
    EXPECT_EQ(cli({"frobnicate"}).code, kExitParse);
    EXPECT_EQ(cli({"simulate", "--protocol", "magic"}).code, kExitParse);
    EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST(CliFixture, ReproducesGoldenBundles) {
    const fs::path dir = scratch("fixture");
    ASSERT_EQ(cli({"--out", dir.string(), "fixture"}).code, kExitOk);
    EXPECT_EQ(read_file(dir / "teacher.json"), read_file(kGolden + "teacher.json"));
    EXPECT_EQ(read_file(dir / "student.json"), read_file(kGolden + "student.json"));
}

TEST(CliToySource, ReproducesBundledData) {
    const CliRun r = cli({"toy-source"});
    ASSERT_EQ(r.code, kExitOk);
    EXPECT_EQ(r.out, read_file(R2D_SOURCE_DIR "/data/toy_nba_50.json"));
}

TEST(CliBinary, ExitCodePropagates) {
    const std::string tool = R2D_TOOL_PATH;
    EXPECT_EQ(std::system((tool + " self-test > /dev/null").c_str()), 0);
    const int status = std::system((tool + " quality /nonexistent.json 2> /dev/null").c_str());
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), kExitParse);
}
