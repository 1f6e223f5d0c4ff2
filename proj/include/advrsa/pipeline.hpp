#pragma once

// Staged command-line pipeline. Each stage writes into <out>/<stage>/, stamps
// stage.json with the hash of the configuration keys it depends on, and
// refuses to run when an upstream stamp is missing (exit 2) or was produced
// under a different configuration (exit 3).

#include <advrsa/adversarial.hpp>
#include <advrsa/checkpoint.hpp>
#include <advrsa/config.hpp>
#include <advrsa/dataset.hpp>
#include <advrsa/encoding.hpp>
#include <advrsa/matrix_io.hpp>
#include <advrsa/rsa.hpp>
#include <advrsa/stats.hpp>
#include <advrsa/svg.hpp>
#include <advrsa/training.hpp>

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace advrsa {

inline const std::array<const char*, 3> stimulus_kinds = {"RE", "AN", "AI"};

/// Stimuli x units matrix of one report layer for one image per stimulus.
inline ActivationMatrix activation_matrix(const Network& net, const std::vector<const Tensor*>& images,
                                          const std::vector<std::string>& ids, const std::string& layer,
                                          const std::string& source) {
  ActivationMatrix m;
  m.source = source;
  m.stimulus_ids = ids;
  std::vector<std::vector<double>> rows(images.size());
  parallel_for(images.size(), [&](std::size_t i) { rows[i] = layer_activations(net, *images[i], layer); });
  const std::size_t width = rows.empty() ? 0 : rows.front().size();
  char buf[32];
  for (std::size_t u = 0; u < width; ++u) {
    std::snprintf(buf, sizeof buf, "u%05zu", u);
    m.unit_ids.emplace_back(buf);
  }
  for (const auto& r : rows) m.values.insert(m.values.end(), r.begin(), r.end());
  return m;
}

/// Activations of the RE, AN or AI member of every stimulus.
inline ActivationMatrix stimulus_activations(const Network& net, const StimulusSet& set, const std::string& layer,
                                             const std::string& kind) {
  std::vector<const Tensor*> images;
  std::vector<std::string> ids;
  for (const Stimulus& s : set) {
    ids.push_back(s.id);
    if (kind == "RE") {
      images.push_back(&s.re.image);
    } else if (kind == "AN") {
      if (!s.an) throw std::invalid_argument("stimulus " + s.id + " has no AN image");
      images.push_back(&s.an->image);
    } else if (kind == "AI") {
      if (!s.ai) throw std::invalid_argument("stimulus " + s.id + " has no AI image");
      images.push_back(&s.ai->image);
    } else {
      throw std::invalid_argument("unknown stimulus kind '" + kind + "'");
    }
  }
  return activation_matrix(net, images, ids, layer, layer + ":" + kind);
}

/// Per-layer RSA of a stimulus set: similarity pair, permutation p-values,
/// and the bootstrap difference test.
struct LayerRsa {
  std::string layer;
  SimilarityPair pair;
  PermutationResult perm_an;
  PermutationResult perm_ai;
  BootstrapResult boot;
};

struct RsaOptions {
  RdmMetric metric = RdmMetric::correlation;
  std::size_t n_perm = 1000;
  std::size_t n_boot = 1000;
  std::vector<double> levels{0.68, 0.95};
  std::uint64_t seed = 1;
};

inline LayerRsa layer_rsa(const std::string& layer, std::size_t layer_index, const ActivationMatrix& re,
                          const ActivationMatrix& an, const ActivationMatrix& ai, const RsaOptions& o) {
  LayerRsa r;
  r.layer = layer;
  r.pair = similarity_pair(re, an, ai, o.metric);
  r.perm_an = permutation_null(re, an, o.n_perm, derive_seed(o.seed, {layer_index, 0}), o.metric);
  r.perm_ai = permutation_null(re, ai, o.n_perm, derive_seed(o.seed, {layer_index, 1}), o.metric);
  r.boot = bootstrap_diff(re, an, ai, o.n_boot, derive_seed(o.seed, {layer_index, 2}), o.levels, o.metric);
  return r;
}

namespace cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_failure = 1;
inline constexpr int exit_missing = 2;
inline constexpr int exit_mismatch = 3;
inline constexpr int exit_validation = 4;

class CommandError : public std::runtime_error {
 public:
  CommandError(int code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  int code() const noexcept { return code_; }

 private:
  int code_;
};

struct StageInfo {
  std::string name;
  std::vector<std::string> prefixes;
  std::vector<std::string> upstream;
};

inline const std::vector<StageInfo>& stages() {
  static const std::vector<StageInfo> s = [] {
    const std::vector<std::string> data{"seed", "data"};
    auto plus = [](std::vector<std::string> v, std::initializer_list<const char*> more) {
      for (const char* m : more) v.emplace_back(m);
      return v;
    };
    const auto train = plus(data, {"train"});
    const auto stimuli = plus(train, {"stimuli"});
    const auto synth = plus(stimuli, {"synth"});
    const auto encode = plus(synth, {"encode", "sim"});
    const auto search = plus(encode, {"searchlight", "rsa.metric"});
    return std::vector<StageInfo>{
        {"gen-data", data, {}},
        {"train", train, {"gen-data"}},
        {"select-re", stimuli, {"train"}},
        {"synth", synth, {"select-re"}},
        {"activations", synth, {"synth"}},
        {"rsa", plus(synth, {"rsa"}), {"activations"}},
        {"encode", encode, {"activations"}},
        {"searchlight", search, {"encode"}},
        {"report", plus(search, {"rsa"}), {"rsa", "encode", "searchlight"}},
    };
  }();
  return s;
}

inline const StageInfo& stage_info(const std::string& name) {
  for (const auto& s : stages()) {
    if (s.name == name) return s;
  }
  throw std::invalid_argument("unknown stage '" + name + "'");
}

/// Sub-seeds of the run seed, one stream per purpose.
struct Seeds {
  std::uint64_t data, network, shuffle, stimuli, synth, rsa, encode, sim;
  explicit Seeds(std::uint64_t s)
      : data(derive_seed(s, {1})),
        network(derive_seed(s, {2})),
        shuffle(derive_seed(s, {3})),
        stimuli(derive_seed(s, {4})),
        synth(derive_seed(s, {5})),
        rsa(derive_seed(s, {6})),
        encode(derive_seed(s, {7})),
        sim(derive_seed(s, {8})) {}
};

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string csv_row(std::initializer_list<std::string> fields) {
  std::string out;
  for (const auto& f : fields) {
    if (!out.empty()) out += ',';
    out += csv_field(f);
  }
  return out + "\n";
}

inline std::string num(double v) { return std::isnan(v) ? std::string("nan") : format_double(v); }

inline double interval_at(const std::vector<Interval>& v, double level, bool upper) {
  for (const auto& i : v) {
    if (std::abs(i.level - level) < 1e-12) return upper ? i.upper : i.lower;
  }
  return nan_value;
}

class Pipeline {
 public:
  Pipeline(RunConfig cfg, fs::path out, std::string invocation = {})
      : cfg_(std::move(cfg)), out_(std::move(out)), invocation_(std::move(invocation)), seeds_(cfg_.u64("seed")) {}

  const RunConfig& config() const noexcept { return cfg_; }

  std::string stage_hash(const std::string& stage) const { return cfg_.hash(stage_info(stage).prefixes); }

  std::string provenance(const std::string& stage) const {
    return "advrsa-version=" + std::string(toolkit_version) + " config-hash=" + stage_hash(stage);
  }

  fs::path dir(const std::string& stage) const { return out_ / stage; }

  /// Throws CommandError(2) for a missing stamp, (3) for a hash mismatch.
  void require(const std::string& stage) const {
    for (const auto& up : stage_info(stage).upstream) {
      const fs::path stamp = dir(up) / "stage.json";
      if (!fs::exists(stamp)) {
        throw CommandError(exit_missing, "missing upstream artifact " + stamp.string() +
                                             "; produce it with: advrsa " + up + invocation_);
      }
      const json j = json::parse(read_text_file(stamp));
      const std::string have = j.at("config_hash");
      const std::string want = stage_hash(up);
      if (have != want) {
        throw CommandError(exit_mismatch, "config hash mismatch for upstream stage '" + up + "': " + stamp.string() +
                                              " has " + have + ", current config gives " + want +
                                              "; rerun: advrsa " + up + invocation_);
      }
    }
  }

  int run(const std::string& cmd) {
    const StageInfo& info = stage_info(cmd);
    require(cmd);
    fs::create_directories(dir(cmd));
    write_text_file(dir(cmd) / "config.resolved", "# " + provenance(cmd) + "\n" + cfg_.resolved());
    bool ok = true;
    json summary;
    if (cmd == "gen-data") summary = gen_data();
    else if (cmd == "train") summary = train_stage();
    else if (cmd == "select-re") summary = select_re();
    else if (cmd == "synth") summary = synth(ok);
    else if (cmd == "activations") summary = activations();
    else if (cmd == "rsa") summary = rsa_stage();
    else if (cmd == "encode") summary = encode();
    else if (cmd == "searchlight") summary = searchlight_stage();
    else if (cmd == "report") summary = report();
    summary["stage"] = info.name;
    summary["config_hash"] = stage_hash(cmd);
    summary["toolkit_version"] = std::string(toolkit_version);
    write_text_file(dir(cmd) / "summary.json", summary.dump(2) + "\n");
    write_text_file(dir(cmd) / "stage.json", json{{"stage", info.name},
                                                  {"config_hash", stage_hash(cmd)},
                                                  {"toolkit_version", std::string(toolkit_version)},
                                                  {"validations_passed", ok}}
                                                     .dump(2) + "\n");
    return ok ? exit_ok : exit_validation;
  }

  /// Stand-alone RSA on explicit matrix files (no upstream stages).
  int rsa_files(const fs::path& re, const fs::path& an, const fs::path& ai) {
    const ActivationMatrix mre = read_matrix(re), man = read_matrix(an), mai = read_matrix(ai);
    for (const auto* m : {&mre, &man, &mai}) m->validate();
    fs::create_directories(dir("rsa"));
    const std::string prov = provenance("rsa");
    const LayerRsa r = layer_rsa(re.stem().string(), 0, mre, man, mai, rsa_options());
    write_text_file(dir("rsa") / "similarity.csv", "# " + prov + "\n" + similarity_header() + similarity_row(r));
    json summary{{"mode", "files"},
                 {"inputs", {re.string(), an.string(), ai.string()}},
                 {"layers", json::array({layer_json(r)})},
                 {"config_hash", stage_hash("rsa")},
                 {"toolkit_version", std::string(toolkit_version)}};
    write_text_file(dir("rsa") / "summary.json", summary.dump(2) + "\n");
    return exit_ok;
  }

  /// Validates an external matrix against the stimulus manifest and stores it
  /// in canonical order under <out>/ingest/<name>.advmat.
  int ingest(const fs::path& input, const std::string& name) {
    require("synth");  // the stimulus manifest comes from select-re
    const fs::path manifest = dir("select-re") / "manifest.csv";
    if (!fs::exists(manifest)) {
      throw CommandError(exit_missing, "missing " + manifest.string() + "; produce it with: advrsa select-re" + invocation_);
    }
    std::vector<std::string> ids;
    for (const auto& row : read_rows(manifest)) ids.push_back(row.at("stimulus_id"));
    ActivationMatrix m = read_matrix(input);
    m.source = name;
    const ReorderResult r = align_stimuli(m, ids);
    r.matrix.validate();
    fs::create_directories(out_ / "ingest");
    write_text_file(out_ / "ingest" / (name + ".advmat"),
                    encode_matrix_binary(r.matrix, json{{"provenance", provenance("synth")}, {"input", input.string()}}));
    write_text_file(out_ / "ingest" / (name + ".json"),
                    json{{"name", name},
                         {"input", input.string()},
                         {"rows", r.matrix.rows()},
                         {"cols", r.matrix.cols()},
                         {"reordered", r.reordered},
                         {"config_hash", stage_hash("synth")},
                         {"toolkit_version", std::string(toolkit_version)}}
                            .dump(2) + "\n");
    return exit_ok;
  }

 private:
  // ---- shared helpers ----

  static std::vector<std::map<std::string, std::string>> read_rows(const fs::path& path) {
    const auto lines = read_csv_lines(path);
    if (lines.empty()) throw FormatError(path.string() + ": empty table");
    const auto header = split_csv_line(lines[0].second);
    std::vector<std::map<std::string, std::string>> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto f = split_csv_line(lines[i].second);
      if (f.size() != header.size()) {
        throw FormatError(path.string() + ":" + std::to_string(lines[i].first) + ": expected " +
                          std::to_string(header.size()) + " fields");
      }
      std::map<std::string, std::string> row;
      for (std::size_t c = 0; c < f.size(); ++c) row[header[c]] = f[c];
      rows.push_back(std::move(row));
    }
    return rows;
  }

  static std::size_t to_size(const std::string& s, const std::string& where) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw FormatError(where + ": expected an integer, got '" + s + "'");
    return v;
  }

  NetworkCheckpoint checkpoint() const { return load_checkpoint(dir("train") / "network.ckpt"); }

  Dataset load_dataset() const {
    Dataset d;
    const fs::path manifest = dir("gen-data") / "manifest.csv";
    for (const auto& row : read_rows(manifest)) {
      LabeledImage li;
      li.id = row.at("id");
      li.label = to_size(row.at("label"), manifest.string());
      li.seed = to_size(row.at("seed"), manifest.string());
      li.image = read_image(out_ / row.at("path"));
      (row.at("split") == "train" ? d.train : d.val).push_back(std::move(li));
    }
    return d;
  }

  StimulusSet load_stimuli(bool with_synth) const {
    const Dataset d = load_dataset();
    std::unordered_map<std::string, const LabeledImage*> by_id;
    for (const auto* v : {&d.train, &d.val}) {
      for (const auto& li : *v) by_id[li.id] = &li;
    }
    StimulusSet set;
    const fs::path manifest = dir("select-re") / "manifest.csv";
    for (const auto& row : read_rows(manifest)) {
      const auto it = by_id.find(row.at("source_id"));
      if (it == by_id.end()) throw FormatError(manifest.string() + ": unknown source image '" + row.at("source_id") + "'");
      set.push_back({row.at("stimulus_id"), *it->second, to_size(row.at("ai_target"), manifest.string()),
                     std::nullopt, std::nullopt});
    }
    if (with_synth) {
      std::unordered_map<std::string, Stimulus*> sid;
      for (auto& s : set) sid[s.id] = &s;
      const fs::path sm = dir("synth") / "manifest.csv";
      for (const auto& row : read_rows(sm)) {
        Stimulus* s = sid.at(row.at("stimulus_id"));
        SynthesisResult r;
        r.kind = row.at("kind") == "AN" ? SynthesisKind::an : SynthesisKind::ai;
        r.target = to_size(row.at("target"), sm.string());
        r.image = read_image(out_ / row.at("path"));
        r.confidence = parse_double(row.at("confidence"), sm.string());
        r.converged = row.at("converged") == "true";
        (r.kind == SynthesisKind::an ? s->an : s->ai) = std::move(r);
      }
    }
    return set;
  }

  fs::path activation_path(const std::string& layer, const std::string& kind) const {
    return dir("activations") / (layer + "_" + kind + ".advmat");
  }

  RsaOptions rsa_options() const {
    RsaOptions o;
    o.metric = rdm_metric_from_string(cfg_.str("rsa.metric"));
    o.n_perm = cfg_.size("rsa.n_perm");
    o.n_boot = cfg_.size("rsa.n_boot");
    o.levels = cfg_.reals("rsa.ci_levels");
    o.seed = seeds_.rsa;
    return o;
  }

  SynthesisConfig synthesis_config(SynthesisKind kind) const {
    SynthesisConfig c = kind == SynthesisKind::an ? SynthesisConfig::an_defaults() : SynthesisConfig::ai_defaults();
    const std::string p = kind == SynthesisKind::an ? "synth.an." : "synth.ai.";
    c.lambda = cfg_.real(p + "lambda");
    c.step = cfg_.real(p + "step");
    c.threshold = cfg_.real("synth.threshold");
    c.max_iterations = cfg_.size("synth.max_iterations");
    c.max_halvings = cfg_.size("synth.max_halvings");
    c.direction = ascent_direction_from_string(cfg_.str("synth.direction"));
    c.momentum = cfg_.real("synth.momentum");
    c.linf_budget = cfg_.real("synth.ai.linf_budget");
    c.init_noise = kind == SynthesisKind::an ? cfg_.real("synth.an.init_noise") : 0.0;
    c.seed = seeds_.synth;
    c.validate();
    return c;
  }

  // ---- stages ----

  json gen_data() {
    DatasetSpec spec;
    spec.classes = cfg_.size("data.classes");
    spec.train_per_class = cfg_.size("data.train_per_class");
    spec.val_per_class = cfg_.size("data.val_per_class");
    spec.image_size = cfg_.size("data.image_size");
    spec.noise_sd = cfg_.real("data.noise_sd");
    spec.seed = seeds_.data;
    const Dataset d = generate_dataset(spec);
    const std::string prov = provenance("gen-data");
    std::string manifest = "# " + prov + "\nid,path,label,split,seed\n";
    for (const auto* split : {&d.train, &d.val}) {
      const std::string name = split == &d.train ? "train" : "val";
      for (const auto& li : *split) {
        const std::string rel = "gen-data/images/" + li.id + ".ppm";
        write_image(out_ / rel, li.image, prov);
        manifest += csv_row({li.id, rel, std::to_string(li.label), name, std::to_string(li.seed)});
      }
    }
    write_text_file(dir("gen-data") / "manifest.csv", manifest);
    write_image(dir("gen-data") / "mean.ppm", mean_image(d.train), prov);
    json classes = json::array();
    for (std::size_t c = 0; c < spec.classes; ++c) classes.push_back(shape_class_names[c]);
    return {{"train_images", d.train.size()}, {"val_images", d.val.size()}, {"classes", classes}};
  }

  json train_stage() {
    const Dataset d = load_dataset();
    const std::size_t classes = cfg_.size("data.classes");
    Network net = Network::initialized(NetworkConfig::toy(classes), seeds_.network);
    TrainConfig tc;
    tc.epochs = cfg_.size("train.epochs");
    tc.learning_rate = cfg_.real("train.learning_rate");
    tc.lr_decay = cfg_.real("train.lr_decay");
    tc.momentum = cfg_.real("train.momentum");
    tc.batch_size = cfg_.size("train.batch_size");
    tc.seed = seeds_.shuffle;
    const TrainHistory h = train(net, d.train, d.val, tc);
    const std::string prov = provenance("train");
    std::string csv = "# " + prov + "\nepoch,learning_rate,train_loss,train_accuracy,val_loss,val_accuracy\n";
    for (const auto& e : h.epochs) {
      csv += csv_row({std::to_string(e.epoch), num(e.learning_rate), num(e.train_loss), num(e.train_accuracy),
                      num(e.val_loss), num(e.val_accuracy)});
    }
    write_text_file(dir("train") / "history.csv", csv);
    save_checkpoint(dir("train") / "network.ckpt",
                    {net, {seeds_.network, tc.epochs, h.final_val_accuracy(), stage_hash("train")}});
    return {{"val_accuracy", h.final_val_accuracy()},
            {"epochs", tc.epochs},
            {"parameters", net.parameter_count()}};
  }

  json select_re() {
    const NetworkCheckpoint ck = checkpoint();
    const Dataset d = load_dataset();
    const double threshold = cfg_.real("stimuli.threshold");
    const auto re = select_re_stimuli(ck.network, d.val, cfg_.size("stimuli.count"), threshold, seeds_.stimuli);
    const StimulusSet set = make_stimulus_set(re, ck.network.config().classes, seeds_.stimuli);
    std::string csv = "# " + provenance("select-re") + "\nstimulus_id,source_id,label,class_name,ai_target,re_confidence\n";
    for (const auto& s : set) {
      const Tensor p = predict(ck.network, s.re.image);
      csv += csv_row({s.id, s.re.id, std::to_string(s.re.label), shape_class_names[s.re.label],
                      std::to_string(s.ai_target), num(p[s.re.label])});
    }
    write_text_file(dir("select-re") / "manifest.csv", csv);
    return {{"stimuli", set.size()}, {"threshold", threshold}};
  }

  json synth(bool& ok) {
    const NetworkCheckpoint ck = checkpoint();
    StimulusSet set = load_stimuli(false);
    const Tensor mean = read_image(dir("gen-data") / "mean.ppm");
    const SynthesisConfig an = synthesis_config(SynthesisKind::an), ai = synthesis_config(SynthesisKind::ai);
    synthesize_stimuli(ck.network, set, mean, an, ai);
    const std::string prov = provenance("synth");
    std::string csv = "# " + prov +
                      "\nstimulus_id,kind,target,confidence,iterations,converged,stop_reason,l2,linf,path,config_hash\n";
    std::size_t an_ok = 0, ai_ok = 0;
    double linf_sum = 0.0;
    for (const auto& s : set) {
      write_image(dir("synth") / "images" / (s.id + "_RE.ppm"), s.re.image, prov);
      for (const SynthesisResult* r : {&*s.an, &*s.ai}) {
        const std::string kind = to_string(r->kind);
        const std::string rel = "synth/images/" + s.id + "_" + kind + ".ppm";
        write_image(out_ / rel, r->image, prov);
        csv += csv_row({s.id, kind, std::to_string(r->target), num(r->confidence), std::to_string(r->iterations),
                        r->converged ? "true" : "false", r->stop_reason, num(r->l2), num(r->linf), rel,
                        r->config_hash});
      }
      an_ok += s.an->converged;
      ai_ok += s.ai->converged;
      linf_sum += s.ai->linf;
    }
    write_text_file(dir("synth") / "manifest.csv", csv);
    const VerificationReport v = verify_stimulus_set(ck.network, set, cfg_.real("synth.threshold"), cfg_.real("stimuli.threshold"));
    std::string vcsv = "# " + prov + "\nstimulus_id,kind,expected_class,predicted_class,confidence,ok\n";
    for (const auto& e : v.entries) {
      vcsv += csv_row({e.id, e.kind, std::to_string(e.expected_class), std::to_string(e.predicted_class),
                       num(e.confidence), e.ok ? "true" : "false"});
    }
    write_text_file(dir("synth") / "verification.csv", vcsv);
    ok = v.violations == 0;
    if (!ok) std::cerr << "synth: " << v.violations << " verification violation(s), see verification.csv\n";
    return {{"stimuli", set.size()},
            {"an_converged", an_ok},
            {"ai_converged", ai_ok},
            {"ai_mean_linf", set.empty() ? 0.0 : linf_sum / static_cast<double>(set.size())},
            {"violations", v.violations},
            {"an_config", an.describe()},
            {"ai_config", ai.describe()}};
  }

  json activations() {
    const NetworkCheckpoint ck = checkpoint();
    const StimulusSet set = load_stimuli(true);
    const std::string prov = provenance("activations");
    json files = json::array();
    for (const auto& rl : ck.network.config().report_layers) {
      for (const char* kind : stimulus_kinds) {
        const ActivationMatrix m = stimulus_activations(ck.network, set, rl.name, kind);
        write_text_file(activation_path(rl.name, kind), encode_matrix_binary(m, json{{"provenance", prov}}));
        files.push_back({{"layer", rl.name}, {"kind", kind}, {"units", m.cols()}});
      }
    }
    return {{"matrices", files}};
  }

  std::vector<std::string> report_layer_names() const {
    std::vector<std::string> names;
    for (const auto& rl : NetworkConfig::toy(cfg_.size("data.classes")).report_layers) names.push_back(rl.name);
    return names;
  }

  static std::string similarity_header() {
    return "layer,metric,r_re_an,r_re_ai,pairs_used,pairs_excluded,p_perm_re_an,p_perm_re_ai,delta,p_boot_delta,"
           "delta_ci68_lo,delta_ci68_hi,delta_ci95_lo,delta_ci95_hi,re_an_ci68_lo,re_an_ci68_hi,re_an_ci95_lo,"
           "re_an_ci95_hi,re_ai_ci68_lo,re_ai_ci68_hi,re_ai_ci95_lo,re_ai_ci95_hi,warning\n";
  }

  static std::string similarity_row(const LayerRsa& r) {
    const auto& b = r.boot;
    auto ci = [](const std::vector<Interval>& v, double lvl, bool up) { return num(interval_at(v, lvl, up)); };
    return csv_row({r.layer, to_string(r.pair.metric), num(r.pair.re_an.rho), num(r.pair.re_ai.rho),
                    std::to_string(r.pair.re_an.pairs_used), std::to_string(r.pair.re_an.pairs_excluded),
                    num(r.perm_an.p_value), num(r.perm_ai.p_value), num(b.delta), num(b.p_value),
                    ci(b.delta_ci, 0.68, false), ci(b.delta_ci, 0.68, true), ci(b.delta_ci, 0.95, false),
                    ci(b.delta_ci, 0.95, true), ci(b.re_an_ci, 0.68, false), ci(b.re_an_ci, 0.68, true),
                    ci(b.re_an_ci, 0.95, false), ci(b.re_an_ci, 0.95, true), ci(b.re_ai_ci, 0.68, false),
                    ci(b.re_ai_ci, 0.68, true), ci(b.re_ai_ci, 0.95, false), ci(b.re_ai_ci, 0.95, true),
                    r.perm_an.warning});
  }

  static json intervals_json(const std::vector<Interval>& v) {
    json a = json::array();
    for (const auto& i : v) a.push_back({{"level", i.level}, {"lower", i.lower}, {"upper", i.upper}});
    return a;
  }

  static json layer_json(const LayerRsa& r) {
    return {{"layer", r.layer},
            {"metric", to_string(r.pair.metric)},
            {"r_re_an", r.pair.re_an.rho},
            {"r_re_ai", r.pair.re_ai.rho},
            {"pairs_used", r.pair.re_an.pairs_used},
            {"pairs_excluded", r.pair.re_an.pairs_excluded},
            {"p_perm_re_an", r.perm_an.p_value},
            {"p_perm_re_ai", r.perm_ai.p_value},
            {"delta", r.boot.delta},
            {"p_boot_delta", r.boot.p_value},
            {"delta_ci", intervals_json(r.boot.delta_ci)},
            {"re_an_ci", intervals_json(r.boot.re_an_ci)},
            {"re_ai_ci", intervals_json(r.boot.re_ai_ci)},
            {"warning", r.perm_an.warning}};
  }

  static json trend_json(const MannKendallResult& m) {
    return {{"s", m.s}, {"variance", m.variance}, {"z", m.z}, {"p_two_sided", m.p_two_sided},
            {"p_increasing", m.p_increasing}, {"p_decreasing", m.p_decreasing}};
  }

  json rsa_stage() {
    const RsaOptions o = rsa_options();
    const std::string prov = provenance("rsa");
    std::string sim = "# " + prov + "\n" + similarity_header();
    std::string null_csv = "# " + prov + "\nlayer,comparison,index,value\n";
    json layers = json::array();
    std::vector<double> an_seq, ai_seq;
    const auto names = report_layer_names();
    for (std::size_t li = 0; li < names.size(); ++li) {
      const auto& name = names[li];
      const ActivationMatrix re = read_matrix(activation_path(name, "RE"));
      const ActivationMatrix an = read_matrix(activation_path(name, "AN"));
      const ActivationMatrix ai = read_matrix(activation_path(name, "AI"));
      const LayerRsa r = layer_rsa(name, li, re, an, ai, o);
      sim += similarity_row(r);
      for (std::size_t i = 0; i < r.perm_an.null_samples.size(); ++i) {
        null_csv += csv_row({name, "RE-AN", std::to_string(i), num(r.perm_an.null_samples[i])});
      }
      for (std::size_t i = 0; i < r.perm_ai.null_samples.size(); ++i) {
        null_csv += csv_row({name, "RE-AI", std::to_string(i), num(r.perm_ai.null_samples[i])});
      }
      layers.push_back(layer_json(r));
      an_seq.push_back(r.pair.re_an.rho);
      ai_seq.push_back(r.pair.re_ai.rho);
    }
    write_text_file(dir("rsa") / "similarity.csv", sim);
    write_text_file(dir("rsa") / "permutation_null.csv", null_csv);
    json trends = json::object();
    if (names.size() >= 4) {
      std::string t = "# " + prov + "\nseries,s,variance,z,p_two_sided,p_increasing,p_decreasing\n";
      for (const auto& [label, seq] : {std::pair{"RE-AN", &an_seq}, std::pair{"RE-AI", &ai_seq}}) {
        const MannKendallResult mk = mann_kendall(*seq);
        t += csv_row({label, std::to_string(mk.s), num(mk.variance), num(mk.z), num(mk.p_two_sided),
                      num(mk.p_increasing), num(mk.p_decreasing)});
        trends[label] = trend_json(mk);
      }
      write_text_file(dir("rsa") / "trend.csv", t);
    }
    return {{"layers", layers}, {"trend", trends}, {"n_perm", o.n_perm}, {"n_boot", o.n_boot}};
  }

  // Responses for encoding/searchlight: either supplied files or simulated voxels.
  struct Responses {
    std::map<std::string, ActivationMatrix> mean;  // RE, AN, AI
    std::optional<ActivationMatrix> trial1, trial2;
    std::optional<VertexGeometry> geometry;
    bool simulated = false;
  };

  std::vector<std::string> stimulus_ids() const {
    std::vector<std::string> ids;
    for (const auto& row : read_rows(dir("select-re") / "manifest.csv")) ids.push_back(row.at("stimulus_id"));
    return ids;
  }

  ActivationMatrix read_aligned(const std::string& path, const std::vector<std::string>& ids) const {
    ActivationMatrix m = read_matrix(path);
    m.validate();
    return align_stimuli(m, ids).matrix;
  }

  Responses simulate_responses(const std::string& prov) {
    Responses r;
    r.simulated = true;
    const std::string layer = cfg_.str("sim.layer");
    const std::size_t grid = cfg_.size("sim.grid");
    const double spacing = cfg_.real("sim.spacing_mm");
    const std::size_t support = cfg_.size("sim.support");
    const double noise = cfg_.real("sim.noise");
    std::map<std::string, ActivationMatrix> act;
    for (const char* kind : stimulus_kinds) act[kind] = read_matrix(activation_path(layer, kind));
    const ActivationMatrix& re = act["RE"];
    // only units that vary over RE stimuli can carry signal
    std::vector<std::size_t> live;
    for (std::size_t c = 0; c < re.cols(); ++c) {
      for (std::size_t i = 1; i < re.rows(); ++i) {
        if (re.at(i, c) != re.at(0, c)) {
          live.push_back(c);
          break;
        }
      }
    }
    if (live.size() < support) throw CommandError(exit_failure, "sim.layer '" + layer + "' has too few varying units");
    VertexGeometry g;
    std::vector<SimulatedVoxelSpec> specs;
    char buf[32];
    for (const char* hemi : {"L", "R"}) {
      const double x0 = std::string(hemi) == "L" ? 0.0 : (static_cast<double>(grid) + 10.0) * spacing;
      for (std::size_t iy = 0; iy < grid; ++iy) {
        for (std::size_t ix = 0; ix < grid; ++ix) {
          const std::size_t v = g.size();
          std::snprintf(buf, sizeof buf, "v%04zu", v);
          g.ids.emplace_back(buf);
          g.x_mm.push_back(x0 + spacing * static_cast<double>(ix));
          g.y_mm.push_back(spacing * static_cast<double>(iy));
          g.hemisphere.emplace_back(hemi);
          Engine eng = make_engine(seeds_.sim, {0x51, v});
          std::vector<std::size_t> pool = live;
          std::shuffle(pool.begin(), pool.end(), eng);
          SimulatedVoxelSpec s;
          s.id = buf;
          s.layer = layer;
          s.support.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(support));
          std::sort(s.support.begin(), s.support.end());
          std::normal_distribution<double> w(0.0, 1.0);
          for (std::size_t k = 0; k < support; ++k) s.weights.push_back(w(eng));
          specs.push_back(std::move(s));
        }
      }
    }
    // noise sd relative to each voxel's signal sd over RE stimuli
    const SimulatedResponses clean = simulate_voxels(re, specs);
    for (std::size_t v = 0; v < specs.size(); ++v) {
      const auto col = clean.signal.column(v);
      const double mu = mean(col);
      double ss = 0.0;
      for (double x : col) ss += (x - mu) * (x - mu);
      specs[v].noise_sd = noise * std::sqrt(ss / static_cast<double>(col.size()));
    }
    std::string truth = "# " + prov + "\nvertex,layer,unit,weight\n";
    for (const auto& s : specs) {
      for (std::size_t k = 0; k < s.support.size(); ++k) {
        truth += csv_row({s.id, s.layer, std::to_string(s.support[k]), num(s.weights[k])});
      }
    }
    write_text_file(dir("encode") / "ground_truth.csv", truth);
    write_text_file(dir("encode") / "geometry.csv", "# " + prov + "\n" + encode_geometry_csv(g));
    for (const char* kind : stimulus_kinds) {
      std::vector<ActivationMatrix> trials;
      for (std::uint64_t t = 0; t < 2; ++t) {
        for (std::size_t v = 0; v < specs.size(); ++v) specs[v].seed = derive_seed(seeds_.sim, {0x7a, t, v, static_cast<std::uint64_t>(kind[1])});
        ActivationMatrix m = simulate_voxels(act[kind], specs).responses;
        m.source = std::string("sim:") + kind + ":trial" + std::to_string(t + 1);
        write_text_file(dir("encode") / ("responses_" + std::string(kind) + "_trial" + std::to_string(t + 1) + ".advmat"),
                        encode_matrix_binary(m, json{{"provenance", prov}}));
        trials.push_back(std::move(m));
      }
      ActivationMatrix avg = trials[0];
      for (std::size_t i = 0; i < avg.values.size(); ++i) avg.values[i] = 0.5 * (trials[0].values[i] + trials[1].values[i]);
      avg.source = std::string("sim:") + kind;
      if (std::string(kind) == "RE") {
        r.trial1 = trials[0];
        r.trial2 = trials[1];
      }
      r.mean[kind] = std::move(avg);
    }
    r.geometry = g;
    return r;
  }

  Responses load_responses(const std::string& prov) {
    if (cfg_.str("encode.responses_re").empty()) return simulate_responses(prov);
    Responses r;
    const auto ids = stimulus_ids();
    r.mean["RE"] = read_aligned(cfg_.str("encode.responses_re"), ids);
    r.mean["AN"] = read_aligned(cfg_.str("encode.responses_an"), ids);
    r.mean["AI"] = read_aligned(cfg_.str("encode.responses_ai"), ids);
    return r;
  }

  static json model_json(const EncodingModel& m) {
    json sup = json::array();
    for (std::size_t k = 0; k < m.support.size(); ++k) {
      const std::size_t j = m.support[k];
      sup.push_back({{"unit", m.scaling.kept[j]}, {"weight", m.weights[k]}, {"mean", m.scaling.mean[j]},
                     {"sd", m.scaling.sd[j]}});
    }
    return {{"vertex", m.vertex}, {"support", sup}, {"intercept", m.intercept}, {"residual_norm", m.residual_norm},
            {"stop", m.stop_reason}, {"rank_deficient", m.rank_deficient}, {"iterations", m.iterations}};
  }

  json encode() {
    const std::string prov = provenance("encode");
    Responses resp = load_responses(prov);
    for (const char* kind : stimulus_kinds) {
      write_text_file(dir("encode") / ("responses_" + std::string(kind) + ".advmat"),
                      encode_matrix_binary(resp.mean[kind], json{{"provenance", prov}}));
    }
    RompOptions ro;
    ro.s_max = cfg_.size("encode.s_max");
    ro.candidates = cfg_.size("encode.candidates");
    ro.tolerance = cfg_.real("encode.tolerance");
    const bool standardize = cfg_.flag("encode.standardize");
    GeneralizationOptions go;
    go.n_perm = cfg_.size("encode.n_perm");
    go.n_boot = cfg_.size("encode.n_boot");
    go.vertex_fraction = cfg_.real("encode.vertex_fraction");
    go.levels = cfg_.reals("rsa.ci_levels");
    const auto names = report_layer_names();
    std::string gen = "# " + prov +
                      "\nlayer,condition,mean_r,undefined,p_perm,ci68_lo,ci68_hi,ci95_lo,ci95_hi,p_ai_gt_an\n";
    std::string cv = "# " + prov + "\nvertex,layer,r\n";
    std::vector<std::vector<double>> cv_r;
    json gen_json = json::array();
    for (std::size_t li = 0; li < names.size(); ++li) {
      const auto& name = names[li];
      const ActivationMatrix re = read_matrix(activation_path(name, "RE"));
      const ActivationMatrix an = read_matrix(activation_path(name, "AN"));
      const ActivationMatrix ai = read_matrix(activation_path(name, "AI"));
      std::vector<EncodingModel> models = fit_models(re, resp.mean["RE"], ro, standardize);
      json mj = json::array();
      for (const auto& m : models) mj.push_back(model_json(m));
      write_text_file(dir("encode") / ("models_" + name + ".json"),
                      json{{"layer", name},
                           {"standardized", standardize},
                           {"s_max", ro.s_max},
                           {"config_hash", stage_hash("encode")},
                           {"toolkit_version", std::string(toolkit_version)},
                           {"models", mj}}
                              .dump(1) + "\n");
      go.seed = derive_seed(seeds_.encode, {li});
      const GeneralizationReport g = generalization_test(models, an, resp.mean["AN"], ai, resp.mean["AI"], go);
      for (const GeneralizationEntry* e : {&g.an, &g.ai}) {
        gen += csv_row({name, e->condition, num(e->mean_r), std::to_string(e->undefined), num(e->p_permutation),
                        num(interval_at(e->ci, 0.68, false)), num(interval_at(e->ci, 0.68, true)),
                        num(interval_at(e->ci, 0.95, false)), num(interval_at(e->ci, 0.95, true)),
                        num(g.p_ai_gt_an)});
        gen_json.push_back({{"layer", name},
                            {"condition", e->condition},
                            {"mean_r", e->mean_r},
                            {"undefined", e->undefined},
                            {"p_perm", e->p_permutation},
                            {"ci", intervals_json(e->ci)},
                            {"p_ai_gt_an", g.p_ai_gt_an}});
      }
      const auto r = cross_validated_r(re, resp.mean["RE"], cfg_.size("encode.folds"), ro, standardize);
      for (std::size_t v = 0; v < r.size(); ++v) cv += csv_row({resp.mean["RE"].unit_ids[v], name, num(r[v])});
      cv_r.push_back(r);
    }
    write_text_file(dir("encode") / "generalization.csv", gen);
    write_text_file(dir("encode") / "cv_scores.csv", cv);
    // layer assignment per ROI: hemispheres when the geometry has them, plus all vertices
    std::vector<std::pair<std::string, std::vector<std::size_t>>> rois;
    const std::size_t nv = resp.mean["RE"].cols();
    rois.push_back({"all", detail::identity_index(nv)});
    if (resp.geometry && resp.geometry->has_hemispheres()) {
      std::map<std::string, std::vector<std::size_t>> by;
      for (std::size_t v = 0; v < nv; ++v) by[resp.geometry->hemisphere[v]].push_back(v);
      for (auto& [h, idx] : by) rois.push_back({h, idx});
    }
    std::string la = "# " + prov + "\nroi,layer,proportion,vertices\n";
    json la_json = json::array();
    for (const auto& [roi, idx] : rois) {
      std::vector<std::vector<double>> sub(names.size());
      for (std::size_t l = 0; l < names.size(); ++l) {
        for (std::size_t v : idx) sub[l].push_back(cv_r[l][v]);
      }
      const LayerAssignment a = layer_assignment(names, sub);
      for (std::size_t l = 0; l < names.size(); ++l) {
        la += csv_row({roi, names[l], num(a.proportions[l]), std::to_string(idx.size() - a.unassigned)});
      }
      la_json.push_back({{"roi", roi}, {"layers", names}, {"proportions", a.proportions}, {"unassigned", a.unassigned}});
    }
    write_text_file(dir("encode") / "layer_assignment.csv", la);
    return {{"simulated", resp.simulated},
            {"vertices", nv},
            {"generalization", gen_json},
            {"layer_assignment", la_json},
            {"sim_layer", resp.simulated ? cfg_.str("sim.layer") : std::string{}}};
  }

  json searchlight_stage() {
    const std::string prov = provenance("searchlight");
    const auto ids = stimulus_ids();
    VertexGeometry g;
    if (!cfg_.str("searchlight.geometry").empty()) {
      g = read_geometry_csv(cfg_.str("searchlight.geometry"));
    } else if (fs::exists(dir("encode") / "geometry.csv")) {
      g = read_geometry_csv(dir("encode") / "geometry.csv");
    } else {
      throw CommandError(exit_missing, "searchlight needs vertex geometry: set searchlight.geometry or run simulated encode");
    }
    auto load = [&](const std::string& key, const fs::path& fallback) {
      const std::string p = cfg_.str(key);
      return read_aligned(p.empty() ? fallback.string() : p, ids);
    };
    const ActivationMatrix t1 = load("searchlight.trial1", dir("encode") / "responses_RE_trial1.advmat");
    const ActivationMatrix t2 = load("searchlight.trial2", dir("encode") / "responses_RE_trial2.advmat");
    const ActivationMatrix re = read_aligned((dir("encode") / "responses_RE.advmat").string(), ids);
    const ActivationMatrix an = read_aligned((dir("encode") / "responses_AN.advmat").string(), ids);
    const ActivationMatrix ai = read_aligned((dir("encode") / "responses_AI.advmat").string(), ids);
    const double radius = cfg_.real("searchlight.radius_mm");
    const RdmMetric metric = rdm_metric_from_string(cfg_.str("rsa.metric"));
    const VertexSelection sel = select_vertices(t1, t2, g, radius, cfg_.size("searchlight.top_n"), metric);
    std::set<std::string> chosen(sel.selected.begin(), sel.selected.end());
    std::string sc = "# " + prov + "\nvertex,hemisphere,score,selected\n";
    for (std::size_t v = 0; v < g.size(); ++v) {
      sc += csv_row({g.ids[v], g.hemisphere[v], std::isinf(sel.scores[v]) ? "-inf" : num(sel.scores[v]),
                     chosen.count(g.ids[v]) ? "true" : "false"});
    }
    write_text_file(dir("searchlight") / "vertex_selection.csv", sc);
    const auto map = searchlight(re, an, ai, g, radius, metric);
    std::string mc = "# " + prov + "\nvertex,x_mm,y_mm,hemisphere,neighborhood,r_re_an,r_re_ai\n";
    for (std::size_t v = 0; v < map.size(); ++v) {
      mc += csv_row({map[v].vertex, num(g.x_mm[v]), num(g.y_mm[v]), g.hemisphere[v],
                     std::to_string(map[v].neighborhood), num(map[v].re_an), num(map[v].re_ai)});
    }
    write_text_file(dir("searchlight") / "map.csv", mc);
    std::vector<std::size_t> cols;
    for (std::size_t c = 0; c < re.cols(); ++c) {
      if (chosen.count(re.unit_ids[c])) cols.push_back(c);
    }
    json roi = json::object();
    if (cols.size() >= 2) {
      const SimilarityPair sp =
          similarity_pair(re.select_columns(cols), an.select_columns(cols), ai.select_columns(cols), metric);
      write_text_file(dir("searchlight") / "roi_similarity.csv",
                      "# " + prov + "\nroi,vertices,r_re_an,r_re_ai\n" +
                          csv_row({"selected", std::to_string(cols.size()), num(sp.re_an.rho), num(sp.re_ai.rho)}));
      roi = {{"vertices", cols.size()}, {"r_re_an", sp.re_an.rho}, {"r_re_ai", sp.re_ai.rho}};
    }
    return {{"vertices", g.size()}, {"selected", sel.selected.size()}, {"radius_mm", radius}, {"roi", roi}};
  }

  json report() {
    const std::string prov = provenance("report");
    const json rsa = json::parse(read_text_file(dir("rsa") / "summary.json"));
    const json enc = json::parse(read_text_file(dir("encode") / "summary.json"));
    std::string f5 = "# " + prov +
                     "\nlayer,r_re_an,r_re_an_ci95_lo,r_re_an_ci95_hi,p_perm_re_an,r_re_ai,r_re_ai_ci95_lo,"
                     "r_re_ai_ci95_hi,p_perm_re_ai,delta,p_boot_delta\n";
    BarChart chart;
    chart.title = "RE-AN and RE-AI representational similarity by layer";
    chart.y_label = "Spearman R";
    chart.y_min = -0.2;
    chart.y_max = 1.0;
    chart.comment = prov;
    BarSeries an{"RE-AN", "#d95f02", {}, {}, {}}, ai{"RE-AI", "#1b9e77", {}, {}, {}};
    auto ci95 = [](const json& arr, bool up) {
      for (const auto& i : arr) {
        if (std::abs(i.at("level").get<double>() - 0.95) < 1e-12) return i.at(up ? "upper" : "lower").get<double>();
      }
      return nan_value;
    };
    auto getd = [](const json& j) { return j.is_null() ? nan_value : j.get<double>(); };
    for (const auto& l : rsa.at("layers")) {
      const std::string name = l.at("layer");
      chart.groups.push_back(name);
      an.values.push_back(getd(l.at("r_re_an")));
      an.lower.push_back(ci95(l.at("re_an_ci"), false));
      an.upper.push_back(ci95(l.at("re_an_ci"), true));
      ai.values.push_back(getd(l.at("r_re_ai")));
      ai.lower.push_back(ci95(l.at("re_ai_ci"), false));
      ai.upper.push_back(ci95(l.at("re_ai_ci"), true));
      f5 += csv_row({name, num(an.values.back()), num(an.lower.back()), num(an.upper.back()),
                     num(getd(l.at("p_perm_re_an"))), num(ai.values.back()), num(ai.lower.back()),
                     num(ai.upper.back()), num(getd(l.at("p_perm_re_ai"))), num(getd(l.at("delta"))),
                     num(getd(l.at("p_boot_delta")))});
    }
    chart.series = {an, ai};
    write_text_file(dir("report") / "layer_similarity.csv", f5);
    write_text_file(dir("report") / "layer_similarity.svg", render_bar_chart(chart));

    std::string la = "# " + prov + "\nroi,layer,proportion\n";
    BarChart lc;
    lc.title = "Proportion of vertices best explained by each layer";
    lc.y_label = "proportion";
    lc.comment = prov;
    const char* palette[] = {"#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d"};
    std::size_t k = 0;
    for (const auto& roi : enc.at("layer_assignment")) {
      const auto layers = roi.at("layers").get<std::vector<std::string>>();
      const auto props = roi.at("proportions").get<std::vector<double>>();
      if (lc.groups.empty()) lc.groups = layers;
      lc.series.push_back({roi.at("roi"), palette[k++ % 5], props, {}, {}});
      for (std::size_t l = 0; l < layers.size(); ++l) la += csv_row({roi.at("roi"), layers[l], num(props[l])});
    }
    write_text_file(dir("report") / "layer_assignment.csv", la);
    write_text_file(dir("report") / "layer_assignment.svg", render_bar_chart(lc));

    std::string gt = "# " + prov + "\nlayer,r_an,p_an,r_an_ci95_lo,r_an_ci95_hi,r_ai,p_ai,r_ai_ci95_lo,r_ai_ci95_hi,p_ai_gt_an\n";
    std::map<std::string, std::map<std::string, json>> by_layer;
    std::vector<std::string> order;
    for (const auto& e : enc.at("generalization")) {
      const std::string layer = e.at("layer");
      if (!by_layer.count(layer)) order.push_back(layer);
      by_layer[layer][e.at("condition")] = e;
    }
    for (const auto& layer : order) {
      const json& a = by_layer[layer]["AN"];
      const json& b = by_layer[layer]["AI"];
      gt += csv_row({layer, num(getd(a.at("mean_r"))), num(getd(a.at("p_perm"))), num(ci95(a.at("ci"), false)),
                     num(ci95(a.at("ci"), true)), num(getd(b.at("mean_r"))), num(getd(b.at("p_perm"))),
                     num(ci95(b.at("ci"), false)), num(ci95(b.at("ci"), true)), num(getd(b.at("p_ai_gt_an")))});
    }
    write_text_file(dir("report") / "generalization.csv", gt);
    return {{"files", {"layer_similarity.csv", "layer_similarity.svg", "layer_assignment.csv", "layer_assignment.svg",
                       "generalization.csv"}},
            {"trend", rsa.at("trend")}};
  }

  RunConfig cfg_;
  fs::path out_;
  std::string invocation_;
  Seeds seeds_;
};

}  // namespace cli
}  // namespace advrsa
