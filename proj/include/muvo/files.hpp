#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "muvo/config.hpp"
#include "muvo/data.hpp"
#include "muvo/errors.hpp"
#include "muvo/trainer.hpp"

namespace muvo {

inline constexpr const char* kCodeVersion = "muvo 1.0.0";
inline constexpr const char* kDatasetFormat = "muvo-dataset 1";

// Dataset directory layout. The unlabeled file carries no labels; its hidden
// truth sits in a separate one-column file that the trainer only reads for
// pseudo-label accuracy reporting.
inline constexpr const char* kSourceFile = "source_train.csv";
inline constexpr const char* kLabeledFile = "target_labeled.csv";
inline constexpr const char* kUnlabeledFile = "target_unlabeled.csv";
inline constexpr const char* kTruthFile = "target_unlabeled_truth.csv";
inline constexpr const char* kValFile = "target_val.csv";
inline constexpr const char* kTestFile = "target_test.csv";
inline constexpr const char* kManifestFile = "manifest.json";

namespace detail {
inline std::string digest_hex(const EVP_MD* md, const std::string& bytes) {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), out, &len, md, nullptr) != 1) throw IoError("digest computation failed");
    std::string hex;
    hex.reserve(2 * len);
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof(buf), "%02x", out[i]);
        hex += buf;
    }
    return hex;
}
}  // namespace detail

inline std::string sha256_hex(const std::string& bytes) { return detail::digest_hex(EVP_sha256(), bytes); }

/// Object id git would assign to a blob with these contents.
inline std::string git_blob_hash(const std::string& bytes) {
    std::string blob = "blob " + std::to_string(bytes.size());
    blob.push_back('\0');
    blob += bytes;
    return detail::digest_hex(EVP_sha1(), blob);
}

inline std::string read_file_bytes(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot open '" + p.string() + "'");
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
    os << bytes;
    if (!os) throw IoError("failed writing '" + p.string() + "'");
}

inline void ensure_directory(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir))
        throw IoError("cannot create directory '" + dir.string() + "': " + (ec ? ec.message() : "not a directory"));
}

inline std::string csv_string(const std::vector<Sample>& samples, std::size_t input_dim) {
    std::ostringstream os;
    write_csv(os, samples, input_dim);
    return os.str();
}

inline std::string truth_csv_string(const std::vector<std::size_t>& truth) {
    std::string out = "label\n";
    for (auto y : truth) out += std::to_string(y) + '\n';
    return out;
}

inline std::vector<std::size_t> parse_truth_csv(const std::string& bytes, const std::string& name) {
    std::istringstream is(bytes);
    std::string line;
    if (!std::getline(is, line) || line != "label") throw CorruptFile(name + ": header must be 'label'");
    std::vector<std::size_t> out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::size_t v = 0;
        auto res = std::from_chars(line.data(), line.data() + line.size(), v);
        if (res.ec != std::errc{} || res.ptr != line.data() + line.size())
            throw CorruptFile(name + ":" + std::to_string(lineno) + ": bad label '" + line + "'");
        out.push_back(v);
    }
    return out;
}

/// Generates the dataset, applies the k-shot split and writes every file
/// plus the manifest. Returns the manifest.
inline nlohmann::json write_dataset_dir(const std::filesystem::path& dir, const DatasetSpec& spec) {
    spec.validate();
    const auto ds = generate(spec);
    const auto td = TrainingData::from(ds, spec);
    ensure_directory(dir);

    const std::vector<std::pair<const char*, std::string>> files = {
        {kSourceFile, csv_string(td.source, spec.input_dim)},
        {kLabeledFile, csv_string(td.target_labeled, spec.input_dim)},
        {kUnlabeledFile, csv_string(td.target_unlabeled, spec.input_dim)},
        {kTruthFile, truth_csv_string(td.unlabeled_truth)},
        {kValFile, csv_string(td.target_val, spec.input_dim)},
        {kTestFile, csv_string(td.target_test, spec.input_dim)},
    };
    const std::vector<std::size_t> rows = {td.source.size(),        td.target_labeled.size(), td.target_unlabeled.size(),
                                           td.unlabeled_truth.size(), td.target_val.size(),     td.target_test.size()};

    nlohmann::json m;
    m["format"] = kDatasetFormat;
    m["code_version"] = kCodeVersion;
    m["spec"] = to_json(spec);
    m["seed"] = spec.seed;
    m["num_classes"] = spec.num_classes;
    m["input_dim"] = spec.input_dim;
    m["labeled_target_rows"] = td.target_labeled.size();
    m["unlabeled_target_rows"] = td.target_unlabeled.size();
    for (std::size_t i = 0; i < files.size(); ++i) {
        write_file_bytes(dir / files[i].first, files[i].second);
        m["files"][files[i].first] = {{"rows", rows[i]}, {"sha256", sha256_hex(files[i].second)}};
    }
    write_file_bytes(dir / kManifestFile, m.dump(2) + "\n");
    return m;
}

struct LoadedDataset {
    nlohmann::json manifest;
    DatasetSpec spec;
    TrainingData data;
};

/// Reads a dataset directory, verifying every file against the manifest's
/// hash and row count.
inline LoadedDataset load_dataset_dir(const std::filesystem::path& dir) {
    LoadedDataset out;
    const auto manifest_path = dir / kManifestFile;
    try {
        out.manifest = nlohmann::json::parse(read_file_bytes(manifest_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw CorruptFile("'" + manifest_path.string() + "' is not valid JSON: " + e.what());
    }
    const auto& m = out.manifest;
    if (!m.is_object() || m.value("format", "") != kDatasetFormat)
        throw CorruptFile("'" + manifest_path.string() + "' is not a " + std::string(kDatasetFormat) + " manifest");
    try {
        out.spec = parse_dataset_spec(m.at("spec"));
    } catch (const InvalidConfig& e) {
        throw CorruptFile("manifest spec: " + std::string(e.what()));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile("manifest spec: " + std::string(e.what()));
    }

    auto checked = [&](const char* name) {
        const auto path = dir / name;
        const auto bytes = read_file_bytes(path);
        if (!m.contains("files") || !m["files"].contains(name)) throw CorruptFile("manifest does not list '" + std::string(name) + "'");
        const auto& entry = m["files"][name];
        if (entry.value("sha256", "") != sha256_hex(bytes))
            throw CorruptFile("'" + path.string() + "' does not match its manifest hash");
        return bytes;
    };
    auto samples = [&](const char* name) {
        std::istringstream is(checked(name));
        auto v = read_csv(is, (dir / name).string());
        if (v.size() != m["files"][name].value("rows", std::size_t{0}))
            throw CorruptFile("'" + (dir / name).string() + "' row count differs from manifest");
        for (const auto& s : v)
            if (s.features.size() != out.spec.input_dim)
                throw CorruptFile("'" + (dir / name).string() + "' feature dimension differs from manifest");
        return v;
    };

    auto& td = out.data;
    td.num_classes = out.spec.num_classes;
    td.source = samples(kSourceFile);
    td.target_labeled = samples(kLabeledFile);
    td.target_unlabeled = samples(kUnlabeledFile);
    td.target_val = samples(kValFile);
    td.target_test = samples(kTestFile);
    td.unlabeled_truth = parse_truth_csv(checked(kTruthFile), (dir / kTruthFile).string());
    if (td.unlabeled_truth.size() != td.target_unlabeled.size())
        throw CorruptFile("truth file length differs from the unlabeled split");
    for (const auto* set : {&td.source, &td.target_labeled, &td.target_val, &td.target_test})
        for (const auto& s : *set)
            if (!s.label || *s.label >= td.num_classes) throw CorruptFile("labeled split has a missing or out-of-range label");
    for (const auto& s : td.target_unlabeled)
        if (s.label) throw CorruptFile("target-unlabeled split exposes a label");
    return out;
}

/// Hashes of every file listed in a dataset manifest.
inline nlohmann::json dataset_hashes(const nlohmann::json& manifest) {
    nlohmann::json h = nlohmann::json::object();
    for (const auto& [name, entry] : manifest.at("files").items()) h[name] = entry.at("sha256");
    return h;
}

}  // namespace muvo
