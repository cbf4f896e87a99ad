#include "dtk/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "dtk/backbone.hpp"
#include "dtk/errors.hpp"

namespace dtk {

namespace {

const std::vector<std::string> kDefaultPhrases = {
    "irregular rhythm noted",    "history of hypertension", "prior infarct suspected",
    "borderline axis deviation", "sinus pattern preserved", "conduction delay present",
};

const std::vector<std::string> kDefaultHints = {
    "mild", "marked", "chronic", "acute", "recurrent", "severe", "transient", "diffuse",
};

const std::vector<std::string> kFillers = {
    "ecg", "reviewed", "report", "resting", "patient", "recording", "clinical", "summary",
};

std::size_t factorial(std::size_t k) {
    std::size_t f = 1;
    for (std::size_t i = 2; i <= k; ++i) f *= i;
    return f;
}

// Fewest items (at least two) whose orderings can label `n` classes.
std::size_t items_for(std::size_t n) {
    std::size_t k = 2;
    while (factorial(k) < n) ++k;
    return k;
}

// The index-th permutation of 0..k-1 in lexicographic order.
std::vector<std::size_t> nth_permutation(std::size_t k, std::size_t index) {
    std::vector<std::size_t> items(k), out;
    for (std::size_t i = 0; i < k; ++i) items[i] = i;
    for (std::size_t left = k; left > 0; --left) {
        const std::size_t block = factorial(left - 1);
        const std::size_t pick = index / block;
        index %= block;
        out.push_back(items[pick]);
        items.erase(items.begin() + std::ptrdiff_t(pick));
    }
    return out;
}

std::vector<std::string> hint_bank(const SyntheticSpec& s) {
    std::vector<std::string> bank = s.hint_words.empty() ? kDefaultHints : s.hint_words;
    for (std::size_t i = bank.size(); i < s.n_coarse; ++i) bank.push_back("pattern" + std::to_string(i));
    return bank;
}

const std::vector<std::string>& phrase_bank(const SyntheticSpec& s) {
    return s.phrases.empty() ? kDefaultPhrases : s.phrases;
}

// Episode layout for the complementarity series: k episodes of `unit`
// samples, separated by `unit` quiet samples, after a `unit` margin.
std::size_t episode_unit(const SyntheticSpec& s) {
    return s.length / (2 * items_for(s.n_coarse) + 2);
}

std::vector<float> make_series(const SyntheticSpec& s, int a, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t T = s.length, d = s.channels;
    std::vector<double> x(T * d, 0.0);

    for (std::size_t c = 0; c < d; ++c) {
        const int waves = 1 + int(rng() % 3);
        for (int w = 0; w < waves; ++w) {
            const double amp = 0.1 + 0.2 * u01(rng);
            const double freq = 0.02 + 0.08 * u01(rng);
            const double phase = 2 * std::numbers::pi * u01(rng);
            for (std::size_t t = 0; t < T; ++t) x[t * d + c] += amp * std::sin(2 * std::numbers::pi * freq * double(t) + phase);
        }
    }

    const double scale = 0.8 + 0.4 * u01(rng);
    if (s.complementarity) {
        // The class is the order of the episodes. Each episode is a flat
        // offset and the quiet stretches outlast any local filter.
        const std::size_t k = items_for(s.n_coarse), unit = episode_unit(s);
        const auto order = nth_permutation(k, std::size_t(a));
        const long shift = long(rng() % (unit + 1)) - long(unit / 2);
        for (std::size_t e = 0; e < k; ++e) {
            const std::size_t item = order[e];
            const double level = (item % 2 == 0 ? 1.5 : -1.5) * (1.0 + 0.5 * double(item / 2)) * scale;
            const long start = long(unit + 2 * e * unit) + shift;
            for (long t = start; t < start + long(unit); ++t)
                for (std::size_t c = 0; c < d; ++c) x[std::size_t(t) * d + c] += level / (1.0 + 0.5 * double(c));
        }
    } else {
        const double freq = 3.0 * double(a + 1) / double(T);
        const double phase = 2 * std::numbers::pi * u01(rng);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < d; ++c)
                x[t * d + c] += scale * std::sin(2 * std::numbers::pi * freq * double(t) + phase) / (1.0 + 0.5 * double(c));
    }

    if (u01(rng) < 0.3) {
        const int spikes = 1 + int(rng() % 3);
        for (int k = 0; k < spikes; ++k) {
            const std::size_t t = rng() % T;
            const double h = (u01(rng) < 0.5 ? -1 : 1) * (1.0 + u01(rng));
            for (std::size_t c = 0; c < d; ++c) x[t * d + c] += h;
        }
    }

    std::vector<float> out(T * d);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = float(x[i] + s.noise * gauss(rng));
    return out;
}

std::string make_text(const SyntheticSpec& s, int b, int hint, std::mt19937_64& rng) {
    const auto& bank = phrase_bank(s);
    std::string text = kFillers[rng() % kFillers.size()];
    if (s.complementarity) {
        for (std::size_t item : nth_permutation(items_for(s.fine_per_coarse()), std::size_t(b))) text += " " + bank[item];
    } else {
        text += " " + bank[std::size_t(b)];
    }
    text += " findings " + hint_bank(s)[std::size_t(hint)];
    text += " " + kFillers[rng() % kFillers.size()];
    return text;
}

double entropy(const std::map<std::vector<int>, std::size_t>& counts, std::size_t n) {
    double h = 0;
    for (const auto& [_, c] : counts) {
        const double p = double(c) / double(n);
        h -= p * std::log(p);
    }
    return h;
}

// Shortest decimal that reads back as the same float through a double.
std::string format_float(float f) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, f);
    std::string s(buf, end);
    if (float(std::strtod(s.c_str(), nullptr)) != f) {
        auto [end2, ec2] = std::to_chars(buf, buf + sizeof buf, double(f));
        s.assign(buf, end2);
    }
    return s;
}

[[noreturn]] void ingest_fail(std::size_t line, const std::string& what) {
    throw IngestError("line " + std::to_string(line) + ": " + what);
}

int read_label(const nlohmann::json& obj, const char* key, std::size_t line) {
    if (!obj.contains(key)) ingest_fail(line, std::string("missing \"") + key + "\"");
    const auto& v = obj.at(key);
    if (!v.is_number_integer()) ingest_fail(line, std::string("\"") + key + "\" must be an integer");
    const auto value = v.get<std::int64_t>();
    if (value < 0 || value > 1'000'000) ingest_fail(line, std::string("\"") + key + "\" out of range");
    return int(value);
}

std::vector<std::vector<std::size_t>> rows_by_class(const Dataset& data, const std::vector<std::size_t>& pool,
                                                    LabelKind kind) {
    std::vector<std::vector<std::size_t>> by(data.n_classes(kind));
    for (std::size_t r : pool) {
        if (r >= data.size()) throw SubsetError("row " + std::to_string(r) + " is outside the dataset");
        const int y = data.label(r, kind);
        if (std::size_t(y) >= by.size()) by.resize(std::size_t(y) + 1);
        by[std::size_t(y)].push_back(r);
    }
    return by;
}

std::vector<std::size_t> all_rows(const Dataset& data) {
    std::vector<std::size_t> rows(data.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return rows;
}

}  // namespace

// ---------------------------------------------------------------- dataset

std::vector<int> Dataset::labels(LabelKind kind) const {
    std::vector<int> out(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) out[i] = label(i, kind);
    return out;
}

void Dataset::validate() const {
    std::set<std::string> ids;
    for (const auto& s : samples) {
        if (s.x.size() != length * channels) {
            throw IngestError("sample " + s.id + ": series has " + std::to_string(s.x.size()) + " values, expected " +
                              std::to_string(length) + "x" + std::to_string(channels));
        }
        if (s.coarse < 0 || std::size_t(s.coarse) >= n_coarse || s.fine < 0 || std::size_t(s.fine) >= n_fine) {
            throw IngestError("sample " + s.id + ": label outside the declared class counts");
        }
        if (!ids.insert(s.id).second) throw IngestError("duplicate sample id " + s.id);
    }
}

// ---------------------------------------------------------------- synthesis

void SyntheticSpec::validate() const {
    auto fail = [](const std::string& m) { throw SpecError(m); };
    if (n_coarse == 0) fail("n_coarse must be positive");
    if (n_fine < n_coarse) fail("n_fine (" + std::to_string(n_fine) + ") is smaller than n_coarse (" +
                                std::to_string(n_coarse) + ")");
    if (n_fine % n_coarse != 0) fail("n_fine must be a multiple of n_coarse");
    if (n_coarse > 24) fail("at most 24 coarse classes are supported");
    if (length == 0 || channels == 0) fail("series length and channel count must be positive");
    if (!(noise >= 0) || !std::isfinite(noise)) fail("noise must be a finite non-negative number");
    if (!(hint_reliability >= 0 && hint_reliability <= 1)) fail("hint_reliability must lie in [0, 1]");
    const std::size_t n_b = fine_per_coarse();
    const std::size_t needed = complementarity ? items_for(n_b) : n_b;
    if (phrase_bank(*this).size() < needed) {
        fail("phrase bank has " + std::to_string(phrase_bank(*this).size()) + " entries, " +
             std::to_string(needed) + " needed");
    }
    if (complementarity && episode_unit(*this) < 4) {
        fail("series length " + std::to_string(length) + " is too short for " + std::to_string(n_coarse) +
             " episode orderings");
    }
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = {{"n_samples", s.n_samples},
         {"T", s.length},
         {"d", s.channels},
         {"n_coarse", s.n_coarse},
         {"n_fine", s.n_fine},
         {"complementarity_mode", s.complementarity},
         {"noise", s.noise},
         {"hint_reliability", s.hint_reliability},
         {"phrases", s.phrases},
         {"hint_words", s.hint_words},
         {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    if (!j.is_object()) throw SpecError("synthetic spec must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "n_samples") s.n_samples = v.get<std::size_t>();
            else if (key == "T") s.length = v.get<std::size_t>();
            else if (key == "d") s.channels = v.get<std::size_t>();
            else if (key == "n_coarse") s.n_coarse = v.get<std::size_t>();
            else if (key == "n_fine") s.n_fine = v.get<std::size_t>();
            else if (key == "complementarity_mode") s.complementarity = v.get<bool>();
            else if (key == "noise") s.noise = v.get<double>();
            else if (key == "hint_reliability") s.hint_reliability = v.get<double>();
            else if (key == "phrases") s.phrases = v.get<std::vector<std::string>>();
            else if (key == "hint_words") s.hint_words = v.get<std::vector<std::string>>();
            else if (key == "seed") s.seed = v.get<std::uint64_t>();
            else throw SpecError("synthetic spec: unknown key \"" + key + "\"");
        } catch (const nlohmann::json::exception& e) {
            throw SpecError("synthetic spec: bad value for \"" + key + "\": " + e.what());
        }
    }
}

int pair_labels(int a, int b, std::size_t n_b, bool complementarity) {
    const int nb = int(n_b);
    return a * nb + (complementarity ? (b + a) % nb : b);
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticData out;
    Dataset& data = out.data;
    data.length = spec.length;
    data.channels = spec.channels;
    data.n_coarse = spec.n_coarse;
    data.n_fine = spec.n_fine;

    const std::size_t n_b = spec.fine_per_coarse(), cells = spec.n_coarse * n_b;
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    // Stratified: every (a, b) cell gets floor or ceil of n/cells samples.
    std::vector<std::size_t> cell(spec.n_samples);
    for (std::size_t i = 0; i < cell.size(); ++i) cell[i] = i % cells;
    std::shuffle(cell.begin(), cell.end(), rng);

    for (std::size_t i = 0; i < spec.n_samples; ++i) {
        Latent z;
        z.a = int(cell[i] / n_b);
        z.b = int(cell[i] % n_b);
        z.hint = z.a;
        if (spec.n_coarse > 1 && u01(rng) >= spec.hint_reliability) {
            z.hint = int(rng() % (spec.n_coarse - 1));
            if (z.hint >= z.a) ++z.hint;
        }
        Sample s;
        char id[32];
        std::snprintf(id, sizeof id, "s%06zu", i);
        s.id = id;
        s.x = make_series(spec, z.a, rng);
        s.text = make_text(spec, z.b, z.hint, rng);
        s.coarse = z.a;
        s.fine = pair_labels(z.a, z.b, n_b, spec.complementarity);
        data.samples.push_back(std::move(s));
        out.latents.push_back(z);
    }

    if (spec.complementarity && n_b > 1 && spec.n_coarse > 1 && spec.n_samples >= 2 * cells) {
        const auto info = label_information(out.latents, data.labels(LabelKind::fine));
        if (!info.complementary()) {
            throw SpecError("generated label table is not complementary (H=" + std::to_string(info.h_fine) +
                            ", I(a)=" + std::to_string(info.i_fine_a) + ", I(b)=" + std::to_string(info.i_fine_b) +
                            ", I(a,b)=" + std::to_string(info.i_fine_ab) + ")");
        }
    }
    return out;
}

bool LabelInformation::complementary() const {
    return i_fine_a < h_fine - 1e-12 && i_fine_b < h_fine - 1e-12 && std::abs(i_fine_ab - h_fine) < 1e-12;
}

LabelInformation label_information(const std::vector<Latent>& latents, const std::vector<int>& fine) {
    if (latents.size() != fine.size()) throw ContractError("latent and label tables differ in length");
    LabelInformation info;
    const std::size_t n = fine.size();
    if (n == 0) return info;
    std::map<std::vector<int>, std::size_t> f, a, b, ab, fa, fb, fab;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& z = latents[i];
        ++f[{fine[i]}];
        ++a[{z.a}];
        ++b[{z.b}];
        ++ab[{z.a, z.b}];
        ++fa[{fine[i], z.a}];
        ++fb[{fine[i], z.b}];
        ++fab[{fine[i], z.a, z.b}];
    }
    info.h_fine = entropy(f, n);
    info.i_fine_a = info.h_fine + entropy(a, n) - entropy(fa, n);
    info.i_fine_b = info.h_fine + entropy(b, n) - entropy(fb, n);
    info.i_fine_ab = info.h_fine + entropy(ab, n) - entropy(fab, n);
    return info;
}

BayesCeiling bayes_ceiling(const std::vector<Latent>& latents, const std::vector<int>& fine,
                           const std::vector<std::size_t>& rows) {
    if (latents.size() != fine.size()) throw ContractError("latent and label tables differ in length");
    BayesCeiling out;
    if (rows.empty()) return out;
    // Majority label inside each group of rows sharing the visible latents.
    auto best = [&](auto key) {
        std::map<std::pair<std::vector<int>, int>, std::size_t> joint;
        std::map<std::vector<int>, std::size_t> top;
        for (std::size_t r : rows) {
            const auto k = key(latents.at(r));
            const std::size_t c = ++joint[{k, fine[r]}];
            top[k] = std::max(top[k], c);
        }
        std::size_t hits = 0;
        for (const auto& [_, c] : top) hits += c;
        return double(hits) / double(rows.size());
    };
    out.text = best([](const Latent& z) { return std::vector<int>{z.b, z.hint}; });
    out.series = best([](const Latent& z) { return std::vector<int>{z.a}; });
    return out;
}

// ---------------------------------------------------------------- storage

Dataset load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open " + path.string());
    Dataset data;
    std::set<std::string> ids;
    std::string text;
    std::size_t line = 0;
    bool shaped = false;
    int max_coarse = -1, max_fine = -1;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            ingest_fail(line, std::string("invalid JSON: ") + e.what());
        }
        if (!obj.is_object()) ingest_fail(line, "expected a JSON object");
        Sample s;
        if (!obj.contains("id") || !obj["id"].is_string()) ingest_fail(line, "\"id\" must be a string");
        if (!obj.contains("text") || !obj["text"].is_string()) ingest_fail(line, "\"text\" must be a string");
        s.id = obj["id"].get<std::string>();
        s.text = obj["text"].get<std::string>();
        s.coarse = read_label(obj, "coarse", line);
        s.fine = read_label(obj, "fine", line);
        if (!ids.insert(s.id).second) ingest_fail(line, "duplicate id \"" + s.id + "\"");

        if (!obj.contains("x") || !obj["x"].is_array() || obj["x"].empty()) {
            ingest_fail(line, "\"x\" must be a non-empty array of rows");
        }
        const auto& x = obj["x"];
        if (!x[0].is_array() || x[0].empty()) ingest_fail(line, "\"x\" rows must be non-empty arrays");
        if (!shaped) {
            data.length = x.size();
            data.channels = x[0].size();
            shaped = true;
        }
        if (x.size() != data.length) {
            ingest_fail(line, "series has " + std::to_string(x.size()) + " timestamps, expected " +
                                  std::to_string(data.length));
        }
        s.x.reserve(data.length * data.channels);
        for (std::size_t t = 0; t < x.size(); ++t) {
            const auto& row = x[t];
            if (!row.is_array()) ingest_fail(line, "row " + std::to_string(t) + " of \"x\" is not an array");
            if (row.size() != data.channels) {
                ingest_fail(line, "row " + std::to_string(t) + " has " + std::to_string(row.size()) +
                                      " channels, expected " + std::to_string(data.channels));
            }
            for (const auto& v : row) {
                if (!v.is_number()) ingest_fail(line, "non-numeric value in row " + std::to_string(t));
                const float f = float(v.get<double>());
                if (!std::isfinite(f)) ingest_fail(line, "non-finite value in row " + std::to_string(t));
                s.x.push_back(f);
            }
        }
        max_coarse = std::max(max_coarse, s.coarse);
        max_fine = std::max(max_fine, s.fine);
        data.samples.push_back(std::move(s));
    }
    data.n_coarse = std::size_t(max_coarse + 1);
    data.n_fine = std::size_t(max_fine + 1);
    return data;
}

void save_jsonl(const Dataset& data, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot write " + path.string());
    for (const auto& s : data.samples) {
        std::string line = "{\"id\":" + nlohmann::json(s.id).dump() + ",\"x\":[";
        for (std::size_t t = 0; t < data.length; ++t) {
            line += t ? ",[" : "[";
            for (std::size_t c = 0; c < data.channels; ++c) {
                if (c) line += ',';
                line += format_float(s.x[t * data.channels + c]);
            }
            line += ']';
        }
        line += "],\"text\":" + nlohmann::json(s.text).dump() + ",\"coarse\":" + std::to_string(s.coarse) +
                ",\"fine\":" + std::to_string(s.fine) + "}\n";
        out << line;
    }
    if (!out) throw IngestError("write failed for " + path.string());
}

std::uint32_t file_checksum(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    return crc32_bytes(bytes.data(), bytes.size());
}

void to_json(nlohmann::json& j, const Manifest& m) {
    j = {{"T", m.length},
         {"d", m.channels},
         {"n_samples", m.n_samples},
         {"n_coarse", m.n_coarse},
         {"n_fine", m.n_fine},
         {"seed", m.seed},
         {"checksum", m.checksum},
         {"extra", m.extra}};
}

void from_json(const nlohmann::json& j, Manifest& m) {
    try {
        m.length = j.at("T").get<std::size_t>();
        m.channels = j.at("d").get<std::size_t>();
        m.n_samples = j.at("n_samples").get<std::size_t>();
        m.n_coarse = j.at("n_coarse").get<std::size_t>();
        m.n_fine = j.at("n_fine").get<std::size_t>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.checksum = j.at("checksum").get<std::uint32_t>();
        m.extra = j.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad manifest: ") + e.what());
    }
}

Dataset load_dataset_dir(const std::filesystem::path& dir) {
    const auto data_path = dir / "data.jsonl", manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(data_path)) throw IngestError("missing " + data_path.string());
    Dataset data = load_jsonl(data_path);
    if (!std::filesystem::exists(manifest_path)) return data;

    std::ifstream in(manifest_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
    }
    const Manifest m = j.get<Manifest>();
    if (file_checksum(data_path) != m.checksum) throw IngestError("data.jsonl does not match the manifest checksum");
    if (m.n_samples != data.size()) throw IngestError("manifest sample count differs from data.jsonl");
    if (!data.empty() && (m.length != data.length || m.channels != data.channels)) {
        throw IngestError("series shape differs from the manifest");
    }
    data.length = m.length;
    data.channels = m.channels;
    data.n_coarse = m.n_coarse;
    data.n_fine = m.n_fine;
    data.validate();
    return data;
}

Manifest save_dataset_dir(const Dataset& data, const std::filesystem::path& dir, std::uint64_t seed,
                          nlohmann::json extra) {
    std::filesystem::create_directories(dir);
    const auto data_path = dir / "data.jsonl";
    save_jsonl(data, data_path);
    Manifest m;
    m.length = data.length;
    m.channels = data.channels;
    m.n_samples = data.size();
    m.n_coarse = data.n_coarse;
    m.n_fine = data.n_fine;
    m.seed = seed;
    m.checksum = file_checksum(data_path);
    m.extra = std::move(extra);
    std::ofstream out(dir / "manifest.json");
    out << nlohmann::json(m).dump(2) << "\n";
    if (!out) throw IngestError("cannot write manifest in " + dir.string());
    return m;
}

// ---------------------------------------------------------------- subsets

SplitIndices split_indices(const Dataset& data, SplitRatios r, std::uint64_t seed) {
    if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
        throw SubsetError("split ratios must be non-negative and sum to 1");
    }
    std::mt19937_64 rng(seed);
    SplitIndices out;
    for (auto& rows : rows_by_class(data, all_rows(data), LabelKind::fine)) {
        std::shuffle(rows.begin(), rows.end(), rng);
        const double n = double(rows.size());
        const auto n_train = std::size_t(std::floor(n * r.train + 0.5));
        const auto n_head = std::max(n_train, std::size_t(std::floor(n * (r.train + r.val) + 0.5)));
        out.train.insert(out.train.end(), rows.begin(), rows.begin() + std::ptrdiff_t(n_train));
        out.val.insert(out.val.end(), rows.begin() + std::ptrdiff_t(n_train), rows.begin() + std::ptrdiff_t(n_head));
        out.test.insert(out.test.end(), rows.begin() + std::ptrdiff_t(n_head), rows.end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

std::vector<std::size_t> kshot_indices(const Dataset& data, const std::vector<std::size_t>& pool, std::size_t k,
                                       std::uint64_t seed, LabelKind kind) {
    if (k == 0) throw SubsetError("K must be positive");
    auto by = rows_by_class(data, pool, kind);
    std::string deficient;
    for (std::size_t c = 0; c < by.size(); ++c) {
        if (by[c].size() < k) {
            deficient += (deficient.empty() ? "" : ", ") + std::string("class ") + std::to_string(c) + " has " +
                         std::to_string(by[c].size());
        }
    }
    if (!deficient.empty()) {
        throw SubsetError(std::to_string(k) + "-shot subset infeasible: " + deficient);
    }
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> out;
    for (auto& rows : by) {
        std::shuffle(rows.begin(), rows.end(), rng);
        out.insert(out.end(), rows.begin(), rows.begin() + std::ptrdiff_t(k));
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::size_t> proportion_indices(const Dataset& data, const std::vector<std::size_t>& pool, double q,
                                            std::uint64_t seed, LabelKind kind) {
    if (!(q > 0 && q <= 1)) throw SubsetError("proportion must lie in (0, 1]");
    auto by = rows_by_class(data, pool, kind);
    const auto target = std::size_t(std::ceil(q * double(pool.size()) - 1e-9));

    std::vector<std::size_t> quota(by.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < by.size(); ++c) {
        const double exact = q * double(by[c].size());
        quota[c] = std::min(by[c].size(), std::size_t(std::floor(exact + 1e-9)));
        assigned += quota[c];
        remainders.emplace_back(-(exact - double(quota[c])), c);
    }
    std::sort(remainders.begin(), remainders.end());
    for (const auto& [_, c] : remainders) {
        if (assigned >= target) break;
        if (quota[c] < by[c].size()) {
            ++quota[c];
            ++assigned;
        }
    }

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < by.size(); ++c) {
        std::shuffle(by[c].begin(), by[c].end(), rng);
        out.insert(out.end(), by[c].begin(), by[c].begin() + std::ptrdiff_t(quota[c]));
    }
    std::sort(out.begin(), out.end());
    return out;
}

Dataset select(const Dataset& data, const std::vector<std::size_t>& rows) {
    Dataset out;
    out.length = data.length;
    out.channels = data.channels;
    out.n_coarse = data.n_coarse;
    out.n_fine = data.n_fine;
    out.samples.reserve(rows.size());
    for (std::size_t r : rows) out.samples.push_back(data.samples.at(r));
    return out;
}

}  // namespace dtk
