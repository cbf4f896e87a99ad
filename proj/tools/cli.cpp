#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtk/errors.hpp"
#include "dtk/model.hpp"
#include "dtk/trainer.hpp"

namespace dtk::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public Error {
public:
    explicit UsageError(const std::string& m) : Error("usage_error", m) {}
};

int exit_code(const std::string& kind) {
    return kind == "usage_error" || kind == "config_error" || kind == "spec_error" ? 2 : 1;
}

void report(std::ostream& err, const std::string& kind, const std::string& message) {
    err << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

// ---------------------------------------------------------------- files

// Everything a subcommand may write. --force removes only these.
const char* const kArtifacts[] = {"config.json", "metrics.jsonl", "metrics.csv",   "final.ckpt",  "vocab.tsv",
                                  "embeddings.csv", "data.jsonl",  "manifest.json", "latents.csv"};

void prepare_out_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir)) {
            if (!force) throw UsageError(dir.string() + " is not empty; pass --force to overwrite");
            for (const char* name : kArtifacts) fs::remove(dir / name);
        }
    }
    fs::create_directories(dir);
}

void refuse_same_dir(const fs::path& out, const fs::path& input) {
    std::error_code ec;
    if (fs::exists(out) && fs::equivalent(out, input, ec)) {
        throw UsageError("--out must differ from the input directory " + input.string());
    }
}

void require_file(const fs::path& path) {
    if (!fs::is_regular_file(path)) throw UsageError("missing file: " + path.string());
}

json read_json(const fs::path& path) {
    require_file(path);
    std::ifstream in(path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

// Scalars become columns; nested objects join keys with '.', arrays append _i.
void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& cells) {
    if (j.is_object()) {
        for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, cells);
    } else if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) flatten(j[i], prefix + "_" + std::to_string(i), cells);
    } else {
        cells.emplace_back(prefix, j);
    }
}

std::string csv_cell(const json& v) {
    if (v.is_null()) return "";
    if (!v.is_string()) return v.dump();
    const auto s = v.get<std::string>();
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
}

/// metrics.jsonl, written line by line and echoed to stdout.
class MetricsLog {
public:
    MetricsLog(const fs::path& dir, std::ostream& echo) : dir_(dir), file_(dir / "metrics.jsonl"), echo_(echo) {
        if (!file_) throw IngestError("cannot write " + (dir / "metrics.jsonl").string());
    }

    void operator()(const json& line) {
        const auto text = line.dump();
        file_ << text << '\n';
        file_.flush();
        echo_ << text << '\n';
        lines_.push_back(line);
    }

    void write_csv() const {
        std::vector<std::string> columns;
        std::vector<std::map<std::string, json>> rows;
        for (const auto& line : lines_) {
            std::vector<std::pair<std::string, json>> cells;
            flatten(line, "", cells);
            std::map<std::string, json> row;
            for (auto& [k, v] : cells) {
                if (std::find(columns.begin(), columns.end(), k) == columns.end()) columns.push_back(k);
                row[k] = v;
            }
            rows.push_back(std::move(row));
        }
        std::ofstream out(dir_ / "metrics.csv");
        for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
        out << '\n';
        for (const auto& row : rows) {
            for (std::size_t c = 0; c < columns.size(); ++c) {
                const auto it = row.find(columns[c]);
                out << (c ? "," : "") << (it == row.end() ? "" : csv_cell(it->second));
            }
            out << '\n';
        }
    }

private:
    fs::path dir_;
    std::ofstream file_;
    std::ostream& echo_;
    std::vector<json> lines_;
};

// ---------------------------------------------------------------- options

/// Flags that override a config value only when given on the command line.
template <typename Target>
class Overrides {
public:
    template <typename V, typename F>
    CLI::Option* add(CLI::App* app, const std::string& name, V initial, const std::string& desc, F apply) {
        auto value = std::make_shared<V>(std::move(initial));
        CLI::Option* opt = app->add_option(name, *value, desc);
        items_.push_back({opt, [value, apply](Target& t) { apply(t, *value); }});
        return opt;
    }

    void apply(Target& t) const {
        for (const auto& [opt, fn] : items_)
            if (opt->count() > 0) fn(t);
    }

private:
    std::vector<std::pair<CLI::Option*, std::function<void(Target&)>>> items_;
};

std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("DTK_SEED");
    if (!s || !*s) return std::nullopt;
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != std::string(s).size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(std::string("DTK_SEED is not an unsigned integer: ") + s);
    }
}

/// A config file holds either a bare TrainConfig or a run's config.json.
void merge_config_file(const std::string& path, TrainConfig& cfg) {
    if (path.empty()) return;
    const json j = read_json(path);
    from_json(j.contains("train") ? j.at("train") : j, cfg);
}

void add_common_train_flags(CLI::App* app, Overrides<TrainConfig>& ov) {
    const TrainConfig d;
    ov.add(app, "--seed", d.seed, "model and shuffling seed", [](TrainConfig& c, std::uint64_t v) { c.seed = v; });
    ov.add(app, "--split-seed", d.split_seed, "seed of the stratified train/val/test split",
           [](TrainConfig& c, std::uint64_t v) { c.split_seed = v; });
    ov.add(app, "--split", std::vector<double>{d.split.train, d.split.val, d.split.test},
           "train, val and test fractions", [](TrainConfig& c, const std::vector<double>& v) {
               if (v.size() != 3) throw ConfigError("--split takes three fractions");
               c.split = SplitRatios{v[0], v[1], v[2]};
           })
        ->expected(3)
        ->delimiter(',');
}

void add_probe_flags(CLI::App* app, Overrides<TrainConfig>& ov) {
    const TrainConfig d;
    ov.add(app, "--probe-lr", d.probe_lr, "Adam step size of the linear classifier",
           [](TrainConfig& c, double v) { c.probe_lr = v; });
    ov.add(app, "--probe-epochs", d.probe_epochs, "full-batch epochs of the linear classifier",
           [](TrainConfig& c, std::size_t v) { c.probe_epochs = v; });
}

// ---------------------------------------------------------------- runs

fs::path data_file(const fs::path& dir) {
    require_file(dir / "data.jsonl");
    return dir / "data.jsonl";
}

struct LoadedRun {
    json config;
    TrainConfig train;
    ModelConfig model;
    Vocab vocab;
    ParameterStore<float> params;
};

LoadedRun load_run(const fs::path& dir) {
    LoadedRun run;
    run.config = read_json(dir / "config.json");
    if (!run.config.contains("train") || !run.config.contains("model") || run.config.value("command", "") != "train") {
        throw UsageError(dir.string() + " is not a train run directory");
    }
    require_file(dir / "vocab.tsv");
    require_file(dir / "final.ckpt");
    from_json(run.config.at("train"), run.train);
    run.model = run.config.at("model").get<ModelConfig>();
    run.vocab = Vocab::load(dir / "vocab.tsv");
    run.params = load_checkpoint<float>(dir / "final.ckpt");
    return run;
}

// ---------------------------------------------------------------- subcommands

struct Common {
    std::string out;
    std::string config;
    bool force = false;
    bool csv = false;
};

void add_out(CLI::App* app, Common& c, bool required) {
    auto* o = app->add_option("--out", c.out, "output directory");
    if (required) o->required();
    app->add_flag("--force", c.force, "overwrite the artifacts of an existing output directory");
    app->add_flag("--csv", c.csv, "also write metrics.csv");
}

int gen_data(const Common& common, const std::string& spec_path, const Overrides<SyntheticSpec>& ov,
             std::ostream& out) {
    SyntheticSpec spec;
    if (!spec_path.empty()) spec = read_json(spec_path).get<SyntheticSpec>();
    if (const auto s = env_seed()) spec.seed = *s;
    ov.apply(spec);
    spec.validate();

    const fs::path dir(common.out);
    prepare_out_dir(dir, common.force);
    const auto synth = generate_synthetic(spec);
    const auto& data = synth.data;

    std::vector<std::size_t> all(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto info = label_information(synth.latents, data.labels(LabelKind::fine));
    const auto ceiling = bayes_ceiling(synth.latents, data.labels(LabelKind::fine), all);
    const auto manifest = save_dataset_dir(data, dir, spec.seed, {{"spec", spec}});

    std::ofstream latents(dir / "latents.csv");
    latents << "id,a,b,hint,coarse,fine\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& l = synth.latents[i];
        const auto& s = data.samples[i];
        latents << s.id << ',' << l.a << ',' << l.b << ',' << l.hint << ',' << s.coarse << ',' << s.fine << '\n';
    }
    write_json(dir / "config.json", {{"command", "gen-data"}, {"spec", spec}});

    MetricsLog log(dir, out);
    log({{"n_samples", data.size()},
         {"checksum", manifest.checksum},
         {"h_fine", info.h_fine},
         {"i_fine_a", info.i_fine_a},
         {"i_fine_b", info.i_fine_b},
         {"i_fine_ab", info.i_fine_ab},
         {"complementary", info.complementary()},
         {"bayes_ceiling_text", ceiling.text},
         {"bayes_ceiling_series", ceiling.series}});
    if (common.csv) log.write_csv();
    return 0;
}

int train_cmd(const Common& common, const std::string& data_dir, bool embeddings, const Overrides<TrainConfig>& ov,
              std::ostream& out) {
    TrainConfig cfg;
    merge_config_file(common.config, cfg);
    if (const auto s = env_seed()) cfg.seed = *s;
    ov.apply(cfg);
    cfg.validate();
    if (cfg.mode != TrainMode::supervised && cfg.mode != TrainMode::unsupervised) {
        throw ConfigError("train takes --mode supervised or unsupervised; use the probe or fewshot subcommand");
    }

    const auto file = data_file(data_dir);
    refuse_same_dir(common.out, data_dir);
    const Dataset data = load_dataset_dir(data_dir);
    const fs::path dir(common.out);
    prepare_out_dir(dir, common.force);

    MetricsLog log(dir, out);
    const auto result = train(cfg, data, [&](const json& line) { log(line); });

    write_json(dir / "config.json", {{"command", "train"},
                                     {"train", cfg},
                                     {"model", result.model_config},
                                     {"data", {{"dir", data_dir}, {"checksum", file_checksum(file)}}},
                                     {"steps", result.steps}});
    result.vocab.save(dir / "vocab.tsv");
    save_checkpoint(result.params, dir / "final.ckpt");
    if (embeddings) export_embeddings(result.model_config, result.vocab, result.params, data, dir / "embeddings.csv");
    if (common.csv) log.write_csv();
    return 0;
}

int probe_cmd(const Common& common, const std::string& run_dir, const std::string& data_dir, bool fewshot,
              const Overrides<TrainConfig>& ov, std::ostream& out) {
    const auto run = load_run(run_dir);
    if (fewshot) {
        if (run.train.mode != TrainMode::supervised || run.train.labels != LabelKind::coarse) {
            throw ConfigError("fewshot needs a run trained with --mode supervised --labels coarse; " + run_dir +
                              " was " + to_string(run.train.mode) + " on " + to_string(run.train.labels) + " labels");
        }
    } else if (run.train.mode != TrainMode::unsupervised) {
        throw ConfigError("probe needs a run trained with --mode unsupervised; " + run_dir + " was " +
                          to_string(run.train.mode));
    }

    TrainConfig cfg = run.train;
    cfg.mode = fewshot ? TrainMode::fewshot : TrainMode::probe;
    if (!fewshot) cfg.labels = LabelKind::fine;
    merge_config_file(common.config, cfg);
    cfg.mode = fewshot ? TrainMode::fewshot : TrainMode::probe;
    if (const auto s = env_seed()) cfg.seed = *s;
    ov.apply(cfg);
    cfg.validate();

    const auto file = data_file(data_dir);
    refuse_same_dir(common.out, run_dir);
    refuse_same_dir(common.out, data_dir);
    const Dataset data = load_dataset_dir(data_dir);
    const fs::path dir(common.out);
    prepare_out_dir(dir, common.force);

    MetricsLog log(dir, out);
    const auto report = probe(cfg, run.model, run.vocab, run.params, data, [&](const json& line) { log(line); });
    write_json(dir / "config.json", {{"command", fewshot ? "fewshot" : "probe"},
                                     {"train", cfg},
                                     {"model", run.model},
                                     {"source_run", run_dir},
                                     {"data", {{"dir", data_dir}, {"checksum", file_checksum(file)}}}});
    log({{"frozen_audit", report.frozen_audit}});
    if (common.csv) log.write_csv();
    if (!report.frozen_audit) throw ContractError("model parameters changed during probing");
    return 0;
}

int eval_cmd(const Common& common, const std::string& run_dir, const std::string& data_dir,
             const std::string& split_name, const std::string& labels, std::ostream& out) {
    const auto run = load_run(run_dir);
    const LabelKind kind = labels.empty() ? run.train.labels : parse_label_kind(labels);
    if (run.train.mode == TrainMode::unsupervised) {
        throw ConfigError("eval scores the model's own classifier, which an unsupervised run never trains; "
                          "use probe");
    }

    const auto file = data_file(data_dir);
    refuse_same_dir(common.out, run_dir);
    refuse_same_dir(common.out, data_dir);
    const Dataset data = load_dataset_dir(data_dir);
    const auto split = split_indices(data, run.train.split, run.train.split_seed);
    std::vector<std::size_t> rows;
    if (split_name == "train") rows = split.train;
    else if (split_name == "val") rows = split.val;
    else if (split_name == "test") rows = split.test;
    else {
        rows.resize(data.size());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    }
    if (rows.empty()) throw SubsetError("the " + split_name + " split is empty");

    const fs::path dir(common.out);
    prepare_out_dir(dir, common.force);
    MetricsLog log(dir, out);
    const auto m = evaluate(run.model, run.vocab, run.params, data, rows, kind);
    json line = to_json(m);
    line["split"] = split_name;
    line["labels"] = to_string(kind);
    log(line);
    write_json(dir / "config.json", {{"command", "eval"},
                                     {"train", run.train},
                                     {"model", run.model},
                                     {"source_run", run_dir},
                                     {"split", split_name},
                                     {"labels", to_string(kind)},
                                     {"data", {{"dir", data_dir}, {"checksum", file_checksum(file)}}}});
    if (common.csv) log.write_csv();
    return 0;
}

int gradcheck_cmd(const Common& common, const Overrides<GradCheckConfig>& ov, std::ostream& out,
                  std::ostream& err) {
    GradCheckConfig cfg;
    if (const auto s = env_seed()) cfg.seed = *s;
    ov.apply(cfg);
    cfg.loss.validate();
    if (!(cfg.step > 0) || !(cfg.tolerance > 0) || cfg.batch < 2) {
        throw ConfigError("gradcheck needs --step > 0, --tolerance > 0 and --batch >= 2");
    }
    std::optional<fs::path> dir;
    if (!common.out.empty()) {
        dir = common.out;
        prepare_out_dir(*dir, common.force);
    }

    const auto r = grad_check(cfg);
    out << std::left << std::setw(14) << "path" << std::setw(24) << "group" << std::right << std::setw(8) << "n"
        << std::setw(9) << "checked" << std::setw(14) << "max_rel_err" << "  result\n";
    for (const auto& g : r.groups) {
        out << std::left << std::setw(14) << g.path << std::setw(24) << g.group << std::right << std::setw(8)
            << g.n_params << std::setw(9) << g.n_checked << std::setw(14) << std::scientific << std::setprecision(2) << g.max_rel_error
            << std::defaultfloat << "  " << (g.pass ? "PASS" : "FAIL") << '\n';
    }
    for (const auto& [path, v] : r.frozen_max_abs_grad) out << "frozen max |grad| on " << path << ": " << v << '\n';

    if (dir) {
        std::ostringstream sink;
        MetricsLog log(*dir, sink);
        for (const auto& g : r.groups)
            log({{"path", g.path}, {"group", g.group}, {"n_params", g.n_params}, {"n_checked", g.n_checked},
                 {"max_rel_error", g.max_rel_error}, {"pass", g.pass}});
        log({{"frozen_max_abs_grad", r.frozen_max_abs_grad}, {"pass", r.pass()}});
        write_json(*dir / "config.json", {{"command", "gradcheck"},
                                          {"profile", cfg.profile},
                                          {"max_per_tensor", cfg.max_per_tensor},
                                          {"seed", cfg.seed},
                                          {"batch", cfg.batch},
                                          {"step", cfg.step},
                                          {"tolerance", cfg.tolerance},
                                          {"variant", to_string(cfg.variant)},
                                          {"loss", cfg.loss}});
        if (common.csv) log.write_csv();
    }
    if (!r.pass()) {
        std::size_t failed = 0;
        for (const auto& g : r.groups) failed += !g.pass;
        report(err, "gradcheck_failed",
               std::to_string(failed) + " parameter group(s) above tolerance or a frozen tensor received gradient");
        return 1;
    }
    return 0;
}

struct InspectArgs {
    std::string profile = "desk";
    std::string run;
    std::string variant;
    std::size_t vocab_size = 0;
    std::size_t n_classes = 0;
    bool as_json = false;
};

int inspect_cmd(const Common& common, const InspectArgs& a, std::ostream& out) {
    ModelConfig m;
    std::string source;
    if (!a.run.empty()) {
        m = read_json(fs::path(a.run) / "config.json").at("model").get<ModelConfig>();
        source = a.run;
    } else {
        TrainConfig cfg;
        cfg.profile = a.profile;
        merge_config_file(common.config, cfg);
        m = profile_by_name(cfg.profile);
        json j = m;
        j.merge_patch(cfg.model_overrides);
        m = j.get<ModelConfig>();
        m.variant = cfg.variant;
        if (m.backbone.vocab_size == 0) m.backbone.vocab_size = cfg.vocab_max;
        source = cfg.profile;
    }
    if (!a.variant.empty()) m.variant = parse_variant(a.variant);
    if (a.vocab_size) m.backbone.vocab_size = a.vocab_size;
    if (a.n_classes) m.n_classes = a.n_classes;
    m.validate();

    const auto c = census(model_layout(m));
    const auto formula = trainable_parameter_formula(m);
    const double fraction = c.total ? double(c.trainable) / double(c.total) : 0.0;
    json summary = {{"source", source},
                    {"variant", to_string(m.variant)},
                    {"total", c.total},
                    {"trainable", c.trainable},
                    {"frozen", c.frozen},
                    {"trainable_fraction", fraction},
                    {"closed_form_trainable", formula},
                    {"closed_form_match", formula == c.trainable}};
    json groups = json::object();
    for (const auto& [g, tf] : c.groups)
        groups[g] = {{"trainable", tf.first}, {"frozen", tf.second}, {"total", tf.first + tf.second}};

    if (a.as_json) {
        json j = summary;
        j["groups"] = groups;
        out << j.dump(2) << '\n';
    } else {
        out << "model: " << source << ", variant " << to_string(m.variant) << "\n\n";
        out << std::left << std::setw(28) << "group" << std::right << std::setw(14) << "total" << std::setw(14)
            << "trainable" << std::setw(14) << "frozen" << '\n';
        for (const auto& [g, tf] : c.groups) {
            out << std::left << std::setw(28) << g << std::right << std::setw(14) << tf.first + tf.second
                << std::setw(14) << tf.first << std::setw(14) << tf.second << '\n';
        }
        out << std::left << std::setw(28) << "all" << std::right << std::setw(14) << c.total << std::setw(14)
            << c.trainable << std::setw(14) << c.frozen << "\n\n";
        out << "trainable fraction: " << std::fixed << std::setprecision(4) << 100.0 * fraction << "%\n"
            << std::defaultfloat;
        out << "closed-form trainable count: " << formula << (formula == c.trainable ? " (matches)" : " (MISMATCH)")
            << '\n';
    }

    if (!common.out.empty()) {
        const fs::path dir(common.out);
        prepare_out_dir(dir, common.force);
        std::ostringstream sink;
        MetricsLog log(dir, sink);
        json line = summary;
        line["groups"] = groups;
        log(line);
        write_json(dir / "config.json", {{"command", "inspect"}, {"model", m}});
        if (common.csv) log.write_csv();
    }
    if (formula != c.trainable) throw ContractError("census disagrees with the closed-form trainable count");
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Dual-adapter multimodal transformer over time series and text."};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.footer(
        "Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error. Errors are printed as\n"
        "one JSON object {\"error\", \"message\"} on stderr. DTK_SEED, when set, replaces the config seed;\n"
        "command-line flags override both.");

    Common common;
    const TrainConfig td;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic time-text dataset");
    std::string spec_path;
    Overrides<SyntheticSpec> gen_ov;
    {
        const SyntheticSpec d;
        gen->add_option("--spec", spec_path, "JSON spec (keys n_samples, T, d, n_coarse, n_fine, ...)");
        add_out(gen, common, true);
        gen_ov.add(gen, "--seed", d.seed, "generator seed", [](SyntheticSpec& s, std::uint64_t v) { s.seed = v; });
        gen_ov.add(gen, "--n-samples", d.n_samples, "number of pairs",
                   [](SyntheticSpec& s, std::size_t v) { s.n_samples = v; });
        gen_ov.add(gen, "--length", d.length, "series length T", [](SyntheticSpec& s, std::size_t v) { s.length = v; });
        gen_ov.add(gen, "--channels", d.channels, "series channels d",
                   [](SyntheticSpec& s, std::size_t v) { s.channels = v; });
        gen_ov.add(gen, "--n-coarse", d.n_coarse, "coarse classes", [](SyntheticSpec& s, std::size_t v) {
            s.n_coarse = v;
        });
        gen_ov.add(gen, "--n-fine", d.n_fine, "fine classes", [](SyntheticSpec& s, std::size_t v) { s.n_fine = v; });
        gen_ov.add(gen, "--complementarity", d.complementarity, "fine label needs both modalities (true/false)",
                   [](SyntheticSpec& s, bool v) { s.complementarity = v; });
        gen_ov.add(gen, "--noise", d.noise, "Gaussian noise std of the series",
                   [](SyntheticSpec& s, double v) { s.noise = v; });
        gen_ov.add(gen, "--hint-reliability", d.hint_reliability, "chance the text hint names the true coarse class",
                   [](SyntheticSpec& s, double v) { s.hint_reliability = v; });
    }

    // train
    auto* tr = app.add_subcommand("train", "supervised or unsupervised training; writes a run directory");
    std::string data_dir;
    bool embeddings = false;
    Overrides<TrainConfig> train_ov;
    {
        tr->add_option("--data", data_dir, "dataset directory holding data.jsonl")->required();
        tr->add_option("--config", common.config, "JSON TrainConfig, or a previous run's config.json");
        add_out(tr, common, true);
        tr->add_flag("--embeddings", embeddings, "export per-sample h_s, h_t to embeddings.csv");
        train_ov.add(tr, "--mode", to_string(td.mode), "supervised or unsupervised",
                     [](TrainConfig& c, const std::string& v) { c.mode = parse_mode(v); });
        train_ov.add(tr, "--variant", to_string(td.variant), "dual, time_only or text_only",
                     [](TrainConfig& c, const std::string& v) { c.variant = parse_variant(v); });
        train_ov.add(tr, "--labels", to_string(td.labels), "fine or coarse",
                     [](TrainConfig& c, const std::string& v) { c.labels = parse_label_kind(v); });
        train_ov.add(tr, "--profile", td.profile, "desk or paper_shape",
                     [](TrainConfig& c, const std::string& v) { c.profile = v; });
        train_ov.add(tr, "--epochs", td.epochs, "passes over the training split",
                     [](TrainConfig& c, std::size_t v) { c.epochs = v; });
        train_ov.add(tr, "--batch-size", td.batch_size, "samples per step",
                     [](TrainConfig& c, std::size_t v) { c.batch_size = v; });
        train_ov.add(tr, "--lr", td.adam.lr, "Adam step size", [](TrainConfig& c, double v) { c.adam.lr = v; });
        train_ov.add(tr, "--vocab-max", td.vocab_max, "vocabulary cap including PAD and UNK",
                     [](TrainConfig& c, std::size_t v) { c.vocab_max = v; });
        train_ov.add(tr, "--tau", td.loss.tau, "contrastive temperature",
                     [](TrainConfig& c, double v) { c.loss.tau = v; });
        train_ov.add(tr, "--noise-sigma", td.loss.noise_sigma, "augmentation noise, fraction of channel std",
                     [](TrainConfig& c, double v) { c.loss.noise_sigma = v; });
        train_ov.add(tr, "--standard-infonce", td.loss.standard_infonce,
                     "include the positive in contrastive denominators (true/false)",
                     [](TrainConfig& c, bool v) { c.loss.standard_infonce = v; });
        add_common_train_flags(tr, train_ov);
    }

    // probe and fewshot
    auto* pr = app.add_subcommand("probe", "linear probe on an unsupervised run's frozen features");
    auto* fs_cmd = app.add_subcommand("fewshot", "few-shot transfer from a coarse-label supervised run");
    std::string run_dir;
    Overrides<TrainConfig> probe_ov, fewshot_ov;
    for (auto* sub : {pr, fs_cmd}) {
        sub->add_option("--run", run_dir, "source run directory")->required();
        sub->add_option("--data", data_dir, "dataset directory holding data.jsonl")->required();
        sub->add_option("--config", common.config, "JSON TrainConfig merged over the source run's");
        add_out(sub, common, true);
    }
    probe_ov.add(pr, "--proportions", td.proportions, "training fractions q",
                 [](TrainConfig& c, const std::vector<double>& v) { c.proportions = v; })
        ->delimiter(',');
    probe_ov.add(pr, "--labels", to_string(td.labels), "fine or coarse",
                 [](TrainConfig& c, const std::string& v) { c.labels = parse_label_kind(v); });
    add_probe_flags(pr, probe_ov);
    add_common_train_flags(pr, probe_ov);
    fewshot_ov.add(fs_cmd, "--K", td.shots, "shots per fine class",
                   [](TrainConfig& c, const std::vector<std::size_t>& v) { c.shots = v; })
        ->delimiter(',');
    add_probe_flags(fs_cmd, fewshot_ov);
    add_common_train_flags(fs_cmd, fewshot_ov);

    // eval
    auto* ev = app.add_subcommand("eval", "score a supervised run's classifier");
    std::string split_name = "test", eval_labels;
    ev->add_option("--run", run_dir, "source run directory")->required();
    ev->add_option("--data", data_dir, "dataset directory holding data.jsonl")->required();
    ev->add_option("--split", split_name, "rows to score")->check(CLI::IsMember({"train", "val", "test", "all"}));
    ev->add_option("--labels", eval_labels, "fine or coarse; empty means the run's own");
    add_out(ev, common, true);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every trainable group, both losses");
    Overrides<GradCheckConfig> gc_ov;
    {
        const GradCheckConfig d;
        add_out(gc, common, false);
        gc_ov.add(gc, "--profile", d.profile, "desk or tiny model shape",
                  [](GradCheckConfig& c, const std::string& v) { c.profile = v; });
        gc_ov.add(gc, "--max-per-tensor", d.max_per_tensor, "elements differenced per tensor, 0 for all",
                  [](GradCheckConfig& c, std::size_t v) { c.max_per_tensor = v; });
        gc_ov.add(gc, "--seed", d.seed, "parameter and input seed",
                  [](GradCheckConfig& c, std::uint64_t v) { c.seed = v; });
        gc_ov.add(gc, "--batch", d.batch, "samples in the checked batch",
                  [](GradCheckConfig& c, std::size_t v) { c.batch = v; });
        gc_ov.add(gc, "--step", d.step, "central-difference step", [](GradCheckConfig& c, double v) { c.step = v; });
        gc_ov.add(gc, "--tolerance", d.tolerance, "largest allowed relative error",
                  [](GradCheckConfig& c, double v) { c.tolerance = v; });
        gc_ov.add(gc, "--variant", to_string(d.variant), "dual, time_only or text_only",
                  [](GradCheckConfig& c, const std::string& v) { c.variant = parse_variant(v); });
        gc_ov.add(gc, "--tau", d.loss.tau, "contrastive temperature",
                  [](GradCheckConfig& c, double v) { c.loss.tau = v; });
        gc_ov.add(gc, "--standard-infonce", d.loss.standard_infonce,
                  "include the positive in contrastive denominators (true/false)",
                  [](GradCheckConfig& c, bool v) { c.loss.standard_infonce = v; });
    }

    // inspect
    auto* in = app.add_subcommand("inspect", "parameter census: total, trainable and frozen per group");
    InspectArgs ia;
    in->add_option("--profile", ia.profile, "desk or paper_shape");
    in->add_option("--config", common.config, "JSON TrainConfig whose profile and model overrides apply");
    in->add_option("--run", ia.run, "read the model from a run directory instead");
    in->add_option("--variant", ia.variant, "dual, time_only or text_only; empty keeps the config's");
    in->add_option("--vocab-size", ia.vocab_size, "vocabulary size; 0 keeps the profile's (or vocab_max)");
    in->add_option("--n-classes", ia.n_classes, "classifier width; 0 keeps the profile's");
    in->add_flag("--json", ia.as_json, "print JSON instead of a table");
    add_out(in, common, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        report(err, "usage_error", e.what());
        return 2;
    }

    try {
        if (gen->parsed()) return gen_data(common, spec_path, gen_ov, out);
        if (tr->parsed()) return train_cmd(common, data_dir, embeddings, train_ov, out);
        if (pr->parsed()) return probe_cmd(common, run_dir, data_dir, false, probe_ov, out);
        if (fs_cmd->parsed()) return probe_cmd(common, run_dir, data_dir, true, fewshot_ov, out);
        if (ev->parsed()) return eval_cmd(common, run_dir, data_dir, split_name, eval_labels, out);
        if (gc->parsed()) return gradcheck_cmd(common, gc_ov, out, err);
        if (in->parsed()) return inspect_cmd(common, ia, out);
    } catch (const Error& e) {
        report(err, e.kind(), e.what());
        return exit_code(e.kind());
    } catch (const nlohmann::json::exception& e) {
        report(err, "config_error", e.what());
        return 2;
    } catch (const std::exception& e) {
        report(err, "runtime_error", e.what());
        return 1;
    }
    report(err, "usage_error", "no subcommand given");
    return 2;
}

}  // namespace dtk::cli
