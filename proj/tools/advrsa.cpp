#include <advrsa/pipeline.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

using advrsa::cli::CommandError;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out = "run";
  std::size_t threads = 0;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "configuration file (key = value lines)");
  sub->add_option("--seed", c.seed, "run seed, overrides the 'seed' key")->each([&](const std::string&) { c.seed_set = true; });
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
  sub->add_option("--threads", c.threads, "worker threads (0 = hardware)")->capture_default_str();
  sub->add_option("--set", c.overrides, "override a config key: key=value (repeatable)");
}

advrsa::RunConfig build_config(const Common& c) {
  advrsa::RunConfig cfg = c.config.empty() ? advrsa::RunConfig{} : advrsa::RunConfig::load(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw advrsa::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1), "--set");
  }
  if (c.seed_set) cfg.set("seed", std::to_string(c.seed), "--seed");
  return cfg;
}

// Flags to repeat when telling the user which upstream command to run.
std::string invocation(const Common& c) {
  std::string s;
  if (!c.config.empty()) s += " --config " + c.config;
  if (c.seed_set) s += " --seed " + std::to_string(c.seed);
  for (const auto& o : c.overrides) s += " --set " + o;
  s += " --out " + c.out;
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial-stimulus representational similarity toolkit"};
  app.set_version_flag("--version", std::string(advrsa::toolkit_version));
  app.require_subcommand(1);
  Common common;
  std::vector<std::pair<std::string, CLI::App*>> stage_cmds;
  for (const auto& s : advrsa::cli::stages()) {
    CLI::App* sub = app.add_subcommand(s.name, "run the " + s.name + " stage");
    add_common(sub, common);
    stage_cmds.emplace_back(s.name, sub);
  }
  std::string re, an, ai;
  for (auto& [name, sub] : stage_cmds) {
    if (name != "rsa") continue;
    sub->add_option("--re", re, "RE activation matrix (CSV or binary)");
    sub->add_option("--an", an, "AN activation matrix");
    sub->add_option("--ai", ai, "AI activation matrix");
  }
  CLI::App* ingest = app.add_subcommand("ingest", "validate and store an external response matrix");
  add_common(ingest, common);
  std::string ingest_input, ingest_name;
  ingest->add_option("input", ingest_input, "matrix file")->required();
  ingest->add_option("--name", ingest_name, "stored name (defaults to the file stem)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : advrsa::cli::exit_failure;
  }

  try {
    advrsa::thread_cap() = common.threads;
    advrsa::cli::Pipeline p(build_config(common), common.out, invocation(common));
    if (ingest->parsed()) {
      return p.ingest(ingest_input, ingest_name.empty() ? std::filesystem::path(ingest_input).stem().string() : ingest_name);
    }
    for (auto& [name, sub] : stage_cmds) {
      if (!sub->parsed()) continue;
      if (name == "rsa" && (!re.empty() || !an.empty() || !ai.empty())) {
        if (re.empty() || an.empty() || ai.empty()) throw advrsa::ConfigError("rsa: --re, --an and --ai go together");
        return p.rsa_files(re, an, ai);
      }
      return p.run(name);
    }
  } catch (const CommandError& e) {
    std::cerr << "advrsa: " << e.what() << "\n";
    return e.code();
  } catch (const std::exception& e) {
    std::cerr << "advrsa: " << e.what() << "\n";
    return advrsa::cli::exit_failure;
  }
  return advrsa::cli::exit_failure;
}
