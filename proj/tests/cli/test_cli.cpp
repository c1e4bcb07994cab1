// Drives the hamil binary end to end: exit codes, run directories, config
// resolution and the per-command outputs.
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "doctest.h"
#include "hamil/serialize.hpp"
#include "httplib.h"

namespace fs = std::filesystem;
using hamil::json;

namespace {

struct Run {
  int rc = -1;
  std::string out;
  std::string err;

  // "key: value" lines of stdout.
  std::string get(const std::string& key) const {
    std::istringstream in(out);
    std::string line;
    const std::string prefix = key + ": ";
    while (std::getline(in, line))
      if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
    return {};
  }
  fs::path dir() const { return get("run-dir"); }
};

const fs::path& work() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("hamil-cli-" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

Run invoke(const std::string& args) {
  const fs::path err = work() / "stderr.txt";
  const std::string cmd = "cd " + quote(work().string()) + " && " + quote(HAMIL_BIN) + " " + args + " 2>" +
                          quote(err.string());
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err);
  std::stringstream s;
  s << in.rdbuf();
  r.err = s.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string last_line(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return last;
}

// Every CSV of a run directory ends with the run's config hash.
void check_footers(const Run& r) {
  const std::string footer = "# config-hash: " + r.get("config-hash");
  std::size_t csvs = 0;
  for (const auto& e : fs::recursive_directory_iterator(work() / r.dir())) {
    if (e.path().extension() != ".csv") continue;
    ++csvs;
    CAPTURE(e.path().string());
    CHECK(last_line(e.path()) == footer);
  }
  CHECK(csvs > 0);
}

// Shared artifacts, built once per process.
const Run& dataset() {
  static const Run r = invoke("classifier make-data --out runs");
  return r;
}

const Run& classifier() {
  static const Run r = invoke("classifier train --out runs --data " + (dataset().dir() / "train.csv").string());
  return r;
}

fs::path classifier_model() { return classifier().get("model"); }
fs::path test_csv() { return dataset().dir() / "test.csv"; }

const char* kSmallAgent = "--perception-mazes 40 --perception-epochs 4 --habit-mazes 200 --habit-epochs 2";

const Run& agent() {
  static const Run r = invoke(std::string("maze train --out runs ") + kSmallAgent);
  return r;
}

fs::path agent_model() { return agent().get("model"); }

}  // namespace

TEST_SUITE("cli-harness") {
  TEST_CASE("usage and help exit codes") {
    CHECK(invoke("").rc == 1);
    CHECK(invoke("--help").rc == 0);
    CHECK(invoke("maze --help").rc == 0);
    CHECK(invoke("frobnicate").rc == 1);
    CHECK(invoke("classifier train --epochs nope").rc == 1);
    CHECK(invoke("classifier train --no-such-flag 3").rc == 1);
    const Run missing = invoke("classifier eval --data x.csv");
    CHECK(missing.rc == 1);
    CHECK(missing.err.find("--model") != std::string::npos);
    CHECK(invoke("classifier eval --model does-not-exist.json --data x.csv").rc == 1);
  }

  TEST_CASE("help lists every knob with its default") {
    const Run r = invoke("operators train --help");
    CHECK(r.rc == 0);
    for (const char* flag : {"--p ", "--rank", "--holdout-fraction", "--max-length", "--trials", "--seed", "--out"}) {
      CAPTURE(flag);
      CHECK(r.out.find(flag) != std::string::npos);
    }
    CHECK(r.out.find("default: 0.15") != std::string::npos);
  }

  TEST_CASE("run directories, headers and footers") {
    const Run& d = dataset();
    REQUIRE(d.rc == 0);
    CHECK(d.get("command") == "classifier make-data");
    CHECK(d.get("seed") == "42");
    const std::string hash = d.get("config-hash");
    CHECK(std::regex_match(hash, std::regex("[0-9a-f]{16}")));
    const std::string name = d.dir().filename().string();
    CHECK(std::regex_match(name, std::regex("[0-9]{8}-[0-9]{6}-" + hash.substr(0, 8) + "(-[0-9]+)?")));
    CHECK(d.get("samples") == "2000 (train 1600, test 400)");
    const json cfg = json::parse(slurp(work() / d.dir() / "config.json"));
    CHECK(cfg.at("command") == "classifier make-data");
    CHECK(cfg.at("synthetic").at("per_class") == 200);
    check_footers(d);
  }

  TEST_CASE("identical configs get distinct directories") {
    std::set<std::string> names;
    std::map<std::string, int> per_stamp;
    for (int i = 0; i < 3; ++i) {
      const Run r = invoke("classifier make-data --out same --per-class 5");
      REQUIRE(r.rc == 0);
      const std::string name = r.dir().filename().string();
      names.insert(name);
      ++per_stamp[name.substr(0, 15)];
    }
    CHECK(names.size() == 3);
    // Within one second the later runs are suffixed.
    for (const auto& n : names)
      if (per_stamp[n.substr(0, 15)] > 1 && n.size() == 15 + 1 + 8) CHECK(names.count(n + "-2") == 1);
  }

  TEST_CASE("config file, then flags") {
    const fs::path cfg = work() / "data-config.json";
    std::ofstream(cfg) << R"({"seed": 9, "synthetic": {"per_class": 7, "noise": "0.3"}, "test_fraction": 0.5})";
    const Run a = invoke("classifier make-data --out cfg --config " + cfg.string());
    REQUIRE(a.rc == 0);
    CHECK(a.get("seed") == "9");
    // Stratified split, half-way counts round up: 4 of 7 per class are held out.
    CHECK(a.get("samples") == "70 (train 30, test 40)");
    const json ra = json::parse(slurp(work() / a.dir() / "config.json"));
    CHECK(ra.at("synthetic").at("noise") == 0.3);

    const Run b = invoke("classifier make-data --out cfg --config " + cfg.string() + " --per-class 3 --seed 10");
    REQUIRE(b.rc == 0);
    CHECK(b.get("seed") == "10");
    CHECK(b.get("samples") == "30 (train 10, test 20)");
    CHECK(b.get("config-hash") != a.get("config-hash"));

    // A saved config.json reproduces its run.
    const Run c = invoke("classifier make-data --out cfg --config " + (work() / a.dir() / "config.json").string());
    REQUIRE(c.rc == 0);
    CHECK(c.get("config-hash") == a.get("config-hash"));
    CHECK(slurp(work() / c.dir() / "data.csv") == slurp(work() / a.dir() / "data.csv"));

    std::ofstream(work() / "bad-key.json") << R"({"synthetic": {"colour": 3}})";
    const Run bad = invoke("classifier make-data --out cfg --config bad-key.json");
    CHECK(bad.rc == 1);
    CHECK(bad.err.find("synthetic.colour") != std::string::npos);
    std::ofstream(work() / "bad-type.json") << R"({"synthetic": {"per_class": "many"}})";
    CHECK(invoke("classifier make-data --out cfg --config bad-type.json").rc == 1);
    std::ofstream(work() / "not-json.json") << "{";
    CHECK(invoke("classifier make-data --out cfg --config not-json.json").rc == 1);
  }

  TEST_CASE("classifier train, eval and topology") {
    const Run& t = classifier();
    REQUIRE(t.rc == 0);
    check_footers(t);
    const json model = json::parse(slurp(work() / classifier_model()));
    CHECK(model.at("run_config").at("command") == "classifier train");
    CHECK(std::stod(t.get("train-accuracy")) > std::stod(t.get("majority-baseline")));

    // train splits its input again; its own test split reproduces the reported accuracy.
    const Run e = invoke("classifier eval --out runs --model " + classifier_model().string() + " --data " +
                         (t.dir() / "test.csv").string());
    REQUIRE(e.rc == 0);
    CHECK(e.get("samples") == "320");
    CHECK(e.get("accuracy") == t.get("test-accuracy"));
    check_footers(e);

    // Same seed, same data: bit-identical model.
    const Run again = invoke("classifier train --out runs --data " + (dataset().dir() / "train.csv").string());
    REQUIRE(again.rc == 0);
    json m1 = json::parse(slurp(work() / classifier_model()));
    json m2 = json::parse(slurp(work() / again.get("model")));
    m1.erase("run_config");
    m2.erase("run_config");
    CHECK(m1 == m2);

    const Run topo = invoke("classifier topology --out runs --tau mean --model " + classifier_model().string());
    REQUIRE(topo.rc == 0);
    CHECK(topo.get("laplacian-ok") == "yes");
    CHECK(std::stod(topo.get("max-asymmetry")) == 0.0);
    CHECK(std::stoul(topo.get("edges")) > 0);
    check_footers(topo);
    CHECK(invoke("classifier topology --out runs --tau lots --model " + classifier_model().string()).rc == 1);
  }

  TEST_CASE("classifier attack") {
    const Run a = invoke("classifier attack --out runs --steps 5 --model " + classifier_model().string() + " --data " +
                        test_csv().string());
    REQUIRE(a.rc == 0);
    CHECK(std::stod(a.get("adversarial-accuracy")) <= std::stod(a.get("clean-accuracy")));
    check_footers(a);
    CHECK(invoke("classifier attack --out runs --lo 1 --hi 0 --model " + classifier_model().string() + " --data " +
                test_csv().string())
              .rc == 1);
  }

  TEST_CASE("surgery single, no-op and malformed rules") {
    const std::string io = " --out runs --model " + classifier_model().string() + " --data " + test_csv().string();
    const Run s = invoke("surgery single --rule dog:cat" + io);
    REQUIRE(s.rc == 0);
    CHECK(s.get("rule") == "dog -> cat");
    const std::string comp = s.get("compliance");
    const double ruled = std::stod(comp.substr(0, comp.find(' ')));
    const double base = std::stod(comp.substr(comp.find("base ") + 5));
    CHECK(ruled > base);
    check_footers(s);

    const Run noop = invoke("surgery single --rule dog:cat --alpha-rep 0 --tunnel-amp 0 --anchor-depth 0" + io);
    REQUIRE(noop.rc == 0);
    CHECK(noop.get("changed-predictions") == "0");

    CHECK(invoke("surgery single --rule dogcat" + io).rc == 1);
    CHECK(invoke("surgery single --rule dog:unicorn" + io).rc == 1);
    CHECK(invoke("surgery single" + io).rc == 1);

    const Run m = invoke("surgery matrix" + io);
    REQUIRE(m.rc == 0);
    CHECK(std::stod(m.get("mean-compliance")) > 0.0);
    check_footers(m);
  }

  TEST_CASE("operators: p = 7 tables and graphs") {
    const Run t = invoke("operators train --out runs --p 7");
    REQUIRE(t.rc == 0);
    CHECK(t.get("holdout") == "1");
    CHECK(t.get("held-out-accuracy") == "1.0000");
    CHECK(t.get("min-chain-accuracy") == "1.0000");
    check_footers(t);
    for (int b = 0; b < 7; ++b) {
      CAPTURE(b);
      const Run g = invoke("operators graph --out runs --b " + std::to_string(b) + " --model " + t.get("bank"));
      REQUIRE(g.rc == 0);
      CHECK(g.get("matches-multiplication-graph") == "yes");
    }
    CHECK(invoke("operators graph --out runs --b 7 --model " + t.get("bank")).rc == 1);
    const Run tab = invoke("operators tables --out runs --model " + t.get("bank"));
    REQUIRE(tab.rc == 0);
    CHECK(tab.get("held-out-accuracy") == t.get("held-out-accuracy"));
  }

  TEST_CASE("operators: p = 13 and invalid moduli") {
    const Run t = invoke("operators train --out runs");
    REQUIRE(t.rc == 0);
    CHECK(t.get("p") == "13");
    CHECK(t.get("holdout") == "2");
    CHECK(t.get("held-out-accuracy") == "1.0000");
    CHECK(t.get("min-chain-accuracy") == "1.0000");
    const Run g = invoke("operators graph --out runs --model " + t.get("bank"));
    REQUIRE(g.rc == 0);
    CHECK(g.get("operator") == "11");
    CHECK(g.get("matches-multiplication-graph") == "yes");
    CHECK(invoke("operators train --out runs --p 8").rc == 1);
    CHECK(invoke("operators train --out runs --holdout-fraction 1.5").rc == 1);
  }

  TEST_CASE("maze staged training errors") {
    const Run a = invoke("maze train --out runs --stage alignment");
    CHECK(a.rc == 1);
    CHECK(a.err.find("actions") != std::string::npos);
    CHECK(invoke("maze train --out runs --stage everything").rc == 1);

    const Run s1 = invoke("maze train --out runs --stage actions");
    REQUIRE(s1.rc == 0);
    CHECK(s1.get("stages") == "actions");
    const Run skip = invoke("maze train --out runs --stage alignment --model " + s1.get("model"));
    CHECK(skip.rc == 1);
    CHECK(skip.err.find("perception") != std::string::npos);
    const Run ev = invoke("maze evaluate --out runs --n 2 --mode energy --model " + s1.get("model"));
    CHECK(ev.rc == 1);
    CHECK(invoke("maze evaluate --out runs --n 2 --mode random --model " + s1.get("model")).rc == 0);
    CHECK(invoke("maze train --out runs --stage perception --crop 5 --model " + s1.get("model")).rc == 1);
  }

  TEST_CASE("maze train, evaluate, run and replay") {
    const Run& t = agent();
    REQUIRE(t.rc == 0);
    CHECK(t.get("stages") == "actions,perception,alignment");
    check_footers(t);
    // Determinism: the same seed trains the same parameters.
    const Run again = invoke(std::string("maze train --out runs ") + kSmallAgent);
    CHECK(again.get("checksum") == t.get("checksum"));

    const Run e = invoke("maze evaluate --out runs --n 80 --mode dual --model " + agent_model().string());
    REQUIRE(e.rc == 0);
    CHECK(e.get("checksum-before") == e.get("checksum-after"));
    CHECK(e.out.find("dual: success") != std::string::npos);
    check_footers(e);
    CHECK(invoke("maze evaluate --out runs --n 2 --mode sideways --model " + agent_model().string()).rc == 1);

    const Run r = invoke("maze run --out runs --maze-seed 5 --model " + agent_model().string());
    REQUIRE(r.rc == 0);
    const fs::path log = r.get("log");
    const Run ok = invoke("maze replay --out runs --log " + log.string() + " --model " + agent_model().string());
    CHECK(ok.rc == 0);
    CHECK(ok.get("identical") == "yes");
    CHECK(ok.get("steps") == r.get("steps"));

    // Corrupt one recorded step: replay names the line.
    std::istringstream in(slurp(work() / log));
    std::vector<json> lines;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) lines.push_back(json::parse(line));
    REQUIRE(lines.size() > 3);
    REQUIRE(lines[2].at("type") == "step");
    lines[2]["to"] = lines[2].at("to").get<int>() + 1;
    const fs::path bad = work() / "tampered.ndjson";
    {
      std::ofstream out(bad);
      for (const auto& l : lines) out << l.dump() << '\n';
    }
    const Run t2 = invoke("maze replay --out runs --log " + bad.string() + " --model " + agent_model().string());
    CHECK(t2.rc == 2);
    CHECK(t2.get("identical") == "no");
    CHECK(t2.get("first-mismatch") == "line 3");
  }

  TEST_CASE("serve answers health and stops on SIGINT") {
    REQUIRE(agent().rc == 0);
    const std::string cmd = "cd " + quote(work().string()) + " && sh -c 'echo $$; exec " + HAMIL_BIN +
                            " serve --port 0 --model " + agent_model().string() + "' 2>/dev/null";
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[512];
    REQUIRE(std::fgets(buf, sizeof buf, p));
    const pid_t pid = static_cast<pid_t>(std::stol(buf));
    int port = 0;
    std::string seen;
    while (std::fgets(buf, sizeof buf, p)) {
      seen += buf;
      const std::string l = buf;
      if (l.rfind("listening: ", 0) == 0) {
        port = std::stoi(l.substr(l.rfind(':') + 1));
        break;
      }
    }
    REQUIRE(port > 0);
    CHECK(seen.find("model: " + agent().get("checksum")) != std::string::npos);
    httplib::Client cli("127.0.0.1", port);
    auto h = cli.Get("/health");
    REQUIRE(h);
    CHECK(h->status == 200);
    CHECK(json::parse(h->body).at("model") == agent().get("checksum"));
    auto created = cli.Post("/v1/sessions", R"({"seed": 3})", "application/json");
    REQUIRE(created);
    CHECK(created->status == 201);
    ::kill(pid, SIGINT);
    while (std::fgets(buf, sizeof buf, p)) seen += buf;
    const int status = ::pclose(p);
    CHECK(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 0);
    CHECK(seen.find("stopped") != std::string::npos);
  }
}
