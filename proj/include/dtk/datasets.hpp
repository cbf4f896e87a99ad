#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace dtk {

/// One time-text pair. `x` is row-major [length × channels].
struct Sample {
    std::string id;
    std::vector<float> x;
    std::string text;
    int coarse = 0;
    int fine = 0;
};

enum class LabelKind { coarse, fine };

struct Dataset {
    std::size_t length = 0;    // T
    std::size_t channels = 0;  // d
    std::size_t n_coarse = 0;
    std::size_t n_fine = 0;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    std::size_t n_classes(LabelKind kind) const { return kind == LabelKind::coarse ? n_coarse : n_fine; }
    int label(std::size_t i, LabelKind kind) const {
        return kind == LabelKind::coarse ? samples[i].coarse : samples[i].fine;
    }
    std::vector<int> labels(LabelKind kind) const;
    /// Throws IngestError when a label or a series shape is out of range.
    void validate() const;
};

// ---------------------------------------------------------------- synthesis

struct SyntheticSpec {
    std::size_t n_samples = 2000;
    std::size_t length = 120;
    std::size_t channels = 2;
    std::size_t n_coarse = 2;
    std::size_t n_fine = 4;
    bool complementarity = true;
    double noise = 0.2;
    /// Probability that the text's hint word names the true coarse class.
    double hint_reliability = 0.62;
    /// Phrase bank keyed to the latent b. Needs at least as many entries as
    /// the orderings require; empty means the built-in bank.
    std::vector<std::string> phrases;
    /// One hint word per coarse class; empty means the built-in list.
    std::vector<std::string> hint_words;
    std::uint64_t seed = 7;

    std::size_t fine_per_coarse() const { return n_fine / n_coarse; }
    /// Throws SpecError.
    void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

/// Discrete generating factors of one synthetic sample.
struct Latent {
    int a = 0;     // coarse class, carried by the series
    int b = 0;     // carried by the text
    int hint = 0;  // coarse class named by the text, correct with prob. r
};

struct SyntheticData {
    Dataset data;
    std::vector<Latent> latents;
};

/// fine = a·n_b + ((b + a) mod n_b) in complementarity mode, a·n_b + b otherwise.
int pair_labels(int a, int b, std::size_t n_b, bool complementarity);

SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// Entropies in nats over the empirical joint distribution of the table.
struct LabelInformation {
    double h_fine = 0;
    double i_fine_a = 0;
    double i_fine_b = 0;
    double i_fine_ab = 0;
    /// I(fine; a) < H, I(fine; b) < H and I(fine; (a,b)) = H up to 1e-12.
    bool complementary() const;
};

LabelInformation label_information(const std::vector<Latent>& latents, const std::vector<int>& fine);

/// Best accuracy attainable on the given rows when a classifier sees only
/// one modality's share of the latents: (b, hint) for text, a for the series.
struct BayesCeiling {
    double text = 0;
    double series = 0;
    double best() const { return text > series ? text : series; }
};

BayesCeiling bayes_ceiling(const std::vector<Latent>& latents, const std::vector<int>& fine,
                           const std::vector<std::size_t>& rows);

// ---------------------------------------------------------------- storage

/// Length and channel count come from the first non-blank line. Class
/// counts are one past the largest label seen.
Dataset load_jsonl(const std::filesystem::path& path);
void save_jsonl(const Dataset& data, const std::filesystem::path& path);

/// CRC-32 of the file's bytes.
std::uint32_t file_checksum(const std::filesystem::path& path);

struct Manifest {
    std::size_t length = 0;
    std::size_t channels = 0;
    std::size_t n_samples = 0;
    std::size_t n_coarse = 0;
    std::size_t n_fine = 0;
    std::uint64_t seed = 0;
    std::uint32_t checksum = 0;
    nlohmann::json extra = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const Manifest& m);
void from_json(const nlohmann::json& j, Manifest& m);

/// Loads `data.jsonl` and checks it against `manifest.json` in `dir`: bytes,
/// shape and class counts. Without a manifest the file is loaded as is.
Dataset load_dataset_dir(const std::filesystem::path& dir);
/// Writes data.jsonl and manifest.json; returns the manifest.
Manifest save_dataset_dir(const Dataset& data, const std::filesystem::path& dir, std::uint64_t seed,
                          nlohmann::json extra = nlohmann::json::object());

// ---------------------------------------------------------------- subsets

struct SplitRatios {
    double train = 0.7;
    double val = 0.15;
    double test = 0.15;
};

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

/// Stratified by fine label; each index list is sorted.
SplitIndices split_indices(const Dataset& data, SplitRatios ratios, std::uint64_t seed);
/// Exactly K rows per class of `kind`, restricted to `pool`. Throws SubsetError
/// naming each class that has fewer than K rows.
std::vector<std::size_t> kshot_indices(const Dataset& data, const std::vector<std::size_t>& pool, std::size_t k,
                                       std::uint64_t seed, LabelKind kind = LabelKind::fine);
/// ceil(q·|pool|) rows of `pool`, allocated to classes by largest remainder.
std::vector<std::size_t> proportion_indices(const Dataset& data, const std::vector<std::size_t>& pool, double q,
                                            std::uint64_t seed, LabelKind kind = LabelKind::fine);

Dataset select(const Dataset& data, const std::vector<std::size_t>& rows);

}  // namespace dtk
