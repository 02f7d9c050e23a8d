#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "attestllm/cli.hpp"

using namespace attestllm;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t line_count(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("attestllm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.jsonc") << R"({
      // four small blocks so embedding takes milliseconds
      "model": {"blocks": 4, "hidden": 16, "heads": 2, "ffn": 32, "vocab": 64},
      "watermark": {"total_bits": 8, "trigger_count": 4, "trigger_length": 8},
      "paths": {"bundle": ")" << (dir_ / "m.atlm").string()
                                << R"(", "keys": ")" << (dir_ / "m.keys").string() << R"("}
    })";
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const char* name) const { return (dir_ / name).string(); }
  std::string config() const { return path("tiny.jsonc"); }

  void keygen_and_embed() {
    ASSERT_EQ(cli({"keygen", "--out", path("k.hex")}).code, kExitOk);
    const CliRun r = cli({"embed", "--config", config(), "--key", path("k.hex")});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }

  fs::path dir_;
};

}  // namespace

TEST(CliBasics, HelpAndUsageErrors) {
  EXPECT_EQ(cli({"--help"}).code, 0);
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(cli({"analyze", "--L", "16"}).code, kExitUsage);
  EXPECT_EQ(cli({"config", "dump", "--tamper", "x"}).code, kExitUsage);
  EXPECT_EQ(cli({"config", "dump", "--k", "17"}).code, kExitUsage);
  EXPECT_EQ(cli({"config", "dump", "--bits", "6"}).code, kExitUsage);
}

TEST(CliBasics, AnalyzePrintsEvasion) {
  const CliRun r = cli({"analyze", "--L", "28", "--k", "2", "--t", "2"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("rounds=10"), std::string::npos);
  EXPECT_NE(r.out.find("evasion         2.207576e-01"), std::string::npos) << r.out;
  const CliRun s = cli({"analyze", "--L", "28", "--k", "2", "--t", "2", "--sessions", "10"});
  EXPECT_NE(s.out.find("sessions=10      2.748882e-07"), std::string::npos) << s.out;
  EXPECT_EQ(cli({"analyze", "--L", "4", "--k", "5", "--t", "1"}).code, kExitUsage);
  EXPECT_EQ(cli({"analyze", "--L", "4", "--k", "2", "--t", "5"}).code, kExitUsage);
  EXPECT_EQ(cli({"analyze", "--L", "4", "--k", "2", "--t", "1", "--f", "0"}).code, kExitUsage);
}

TEST(CliBasics, ConfigDumpReflectsFlags) {
  const CliRun r = cli({"config", "dump", "--k", "4", "--mode", "sequential", "--seed", "9"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["policy"]["sample"], 4);
  EXPECT_EQ(j["policy"]["mode"], "sequential");
  EXPECT_EQ(j["run"]["seed"], 9);
}

TEST_F(CliTest, KeygenRefusesToOverwrite) {
  ASSERT_EQ(cli({"keygen", "--out", path("k.hex")}).code, kExitOk);
  EXPECT_EQ(fs::status(path("k.hex")).permissions() & fs::perms::all, fs::perms::owner_read | fs::perms::owner_write);
  EXPECT_EQ(slurp(path("k.hex")).size(), 65u);
  EXPECT_EQ(cli({"keygen", "--out", path("k.hex")}).code, kExitUsage);
  EXPECT_EQ(cli({"keygen", "--out", path("k.hex"), "--force"}).code, kExitOk);
}

TEST_F(CliTest, EmbedThenAttestPasses) {
  keygen_and_embed();
  EXPECT_TRUE(fs::exists(path("m.atlm")));
  EXPECT_TRUE(fs::exists(path("m.atlm.json")));
  EXPECT_TRUE(fs::exists(path("m.keys")));
  const CliRun a = cli({"attest", "--config", config(), "--key", path("k.hex")});
  ASSERT_EQ(a.code, kExitOk) << a.err;
  const auto j = nlohmann::json::parse(a.out);
  EXPECT_EQ(j["aggregate"]["verdict"], "pass");
  EXPECT_EQ(j["bundle"]["matches_manifest"], true);
  const CliRun b = cli({"attest", "--config", config(), "--key", path("k.hex")});
  EXPECT_EQ(a.out, b.out);
  const CliRun single = cli({"attest", "--config", config(), "--key", path("k.hex"), "--single-round"});
  EXPECT_EQ(nlohmann::json::parse(single.out)["rounds"].size(), 1u);
}

TEST_F(CliTest, WrongKeyIsAnAuthenticationFailure) {
  keygen_and_embed();
  ASSERT_EQ(cli({"keygen", "--out", path("other.hex")}).code, kExitOk);
  EXPECT_EQ(cli({"attest", "--config", config(), "--key", path("other.hex")}).code, kExitAuthentication);
}

TEST_F(CliTest, ReplacedBundleAborts) {
  keygen_and_embed();
  const CliRun atk = cli({"attack", "--config", config(), "--key", path("k.hex"), "--tamper", "all", "--trials", "3",
                       "--tampered-out", path("t.atlm")});
  ASSERT_EQ(atk.code, kExitOk) << atk.err;
  EXPECT_EQ(nlohmann::json::parse(atk.out)["attack"]["trials"], 3);
  const CliRun r = cli({"attest", "--config", config(), "--key", path("k.hex"), "--bundle", path("t.atlm")});
  EXPECT_EQ(r.code, kExitAbort) << r.err;
  EXPECT_NE(r.err.find("differ from its manifest"), std::string::npos);

  // Without the victim's manifest the bundle's own hash is used, which the key store rejects.
  fs::remove(path("t.atlm.json"));
  EXPECT_EQ(cli({"attest", "--config", config(), "--key", path("k.hex"), "--bundle", path("t.atlm")}).code,
            kExitAuthentication);
}

TEST_F(CliTest, PartialTamperReportsEvasion) {
  keygen_and_embed();
  const CliRun r = cli({"attack", "--config", config(), "--key", path("k.hex"), "--tamper", "1", "--sessions", "200"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["attack"]["kind"], "partial_tamper");
  EXPECT_EQ(j["attack"]["sessions"], 200);
  EXPECT_EQ(cli({"attack", "--config", config(), "--key", path("k.hex")}).code, kExitUsage);
  EXPECT_EQ(cli({"attack", "--config", config(), "--key", path("k.hex"), "--tamper", "9"}).code, kExitUsage);
}

TEST_F(CliTest, KeyFromEnvironment) {
  ASSERT_EQ(cli({"keygen", "--out", path("k.hex")}).code, kExitOk);
  ::setenv("ATTESTLLM_KEY_FILE", path("k.hex").c_str(), 1);
  EXPECT_EQ(cli({"embed", "--config", config()}).code, kExitOk);
  EXPECT_EQ(cli({"attest", "--config", config()}).code, kExitOk);
  ::unsetenv("ATTESTLLM_KEY_FILE");
  EXPECT_EQ(cli({"attest", "--config", config()}).code, kExitUsage);
}

TEST_F(CliTest, EmptySignatureWarns) {
  ASSERT_EQ(cli({"keygen", "--out", path("k.hex")}).code, kExitOk);
  std::ofstream(path("zero.jsonc")) << R"({"model": {"blocks": 2, "hidden": 16, "heads": 2, "ffn": 32, "vocab": 64},
    "watermark": {"total_bits": 0, "trigger_count": 2, "trigger_length": 4},
    "paths": {"bundle": ")" << path("z.atlm") << R"(", "keys": ")" << path("z.keys") << R"("}})";
  const CliRun r = cli({"embed", "--config", path("zero.jsonc"), "--key", path("k.hex")});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.err.find("nothing embedded"), std::string::npos);
}

TEST_F(CliTest, FailedKeyWriteLeavesNoBundle) {
  ASSERT_EQ(cli({"keygen", "--out", path("k.hex")}).code, kExitOk);
  const CliRun r = cli({"embed", "--config", config(), "--key", path("k.hex"), "--keys", path("missing/dir/m.keys")});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_FALSE(fs::exists(path("m.atlm")));
  EXPECT_FALSE(fs::exists(path("m.atlm.json")));
}

TEST_F(CliTest, EmbedReportAndTable) {
  ASSERT_EQ(cli({"keygen", "--out", path("k.hex")}).code, kExitOk);
  const CliRun r = cli({"embed", "--config", config(), "--key", path("k.hex"), "--out", path("embed.json")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("block  bits"), std::string::npos);
  EXPECT_NE(r.out.find("signature lengths:"), std::string::npos);
  const auto j = nlohmann::json::parse(slurp(path("embed.json")));
  EXPECT_EQ(j["blocks"].size(), 4u);
  EXPECT_EQ(j["all_verified"], true);
}

TEST_F(CliTest, SimulateAppendsCsvRows) {
  const std::vector<std::string> args = {"simulate", "--sweep", "all", "--csv-dir", path("csv"), "--out", path("s.json")};
  ASSERT_EQ(cli(args).code, kExitOk);
  ASSERT_EQ(cli(args).code, kExitOk);
  const std::string interval = slurp(path("csv/interval_sweep.csv"));
  EXPECT_EQ(interval.rfind("run,sweep,interval", 0), 0u);
  EXPECT_EQ(line_count(interval), 1u + 2 * 4);
  EXPECT_EQ(line_count(slurp(path("csv/sample_sweep.csv"))), 1u + 2 * 4);
  EXPECT_EQ(line_count(slurp(path("csv/stage_breakdown.csv"))), 1u + 2 * 2);
  const auto j = nlohmann::json::parse(slurp(path("s.json")));
  EXPECT_EQ(j["sweeps"]["interval"].size(), 4u);
  EXPECT_EQ(cli({"simulate", "--tamper", "all"}).code, kExitUsage);
  EXPECT_EQ(cli({"simulate", "--sweep", "sample", "--samples", "0"}).code, kExitUsage);
  const CliRun tampered = cli({"simulate", "--tamper", "16"});
  EXPECT_EQ(tampered.code, kExitAbort);
}
