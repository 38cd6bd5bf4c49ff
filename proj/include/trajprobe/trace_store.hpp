#pragma once

// TRAJ1 trace container.
//
//   offset 0   magic  54 52 41 4A 31 00 00 00   ("TRAJ1\0\0\0")
//   offset 8   u64 little-endian manifest byte length N
//   offset 16  N bytes of UTF-8 JSON manifest
//   payload    for each record, for layer 1..L, H little-endian floats of the
//              manifest dtype (f32 or f16)
//
// All values are widened to double on read.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajprobe/binary_io.hpp"
#include "trajprobe/errors.hpp"

namespace trajprobe {

enum class Dtype { f32, f16 };

inline constexpr std::array<char, 8> kTraceMagic{'T', 'R', 'A', 'J', '1', '\0', '\0', '\0'};

inline std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 2; }

inline std::string to_string(Dtype d) { return d == Dtype::f32 ? "f32" : "f16"; }

inline Dtype parse_dtype(const std::string& s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f16") return Dtype::f16;
    throw FormatError("unknown dtype '" + s + "'");
}

struct RecordMeta {
    std::string example_id;
    bool correct = true;
    double msp = 1.0;
    int predicted_option = 0;
    int gold_option = 0;
    std::optional<std::vector<double>> candidate_probs;

    friend bool operator==(const RecordMeta&, const RecordMeta&) = default;
};

struct TraceManifest {
    std::string model_id;
    std::string dataset_id;
    std::size_t n_examples = 0;
    std::size_t n_layers = 0;
    std::size_t hidden_dim = 0;
    Dtype dtype = Dtype::f32;
    std::vector<RecordMeta> records;
    // Free-form producer metadata (prompt template version, generator spec, ...).
    nlohmann::json attributes = nlohmann::json::object();

    std::size_t record_values() const { return n_layers * hidden_dim; }
    std::uint64_t payload_bytes() const {
        return static_cast<std::uint64_t>(n_examples) * record_values() * dtype_size(dtype);
    }

    friend bool operator==(const TraceManifest&, const TraceManifest&) = default;
};

/// One example: metadata plus L write-vectors of length H, stored layer-major.
struct TrajectoryRecord {
    RecordMeta meta;
    std::size_t n_layers = 0;
    std::size_t hidden_dim = 0;
    std::vector<double> writes;

    TrajectoryRecord() = default;
    TrajectoryRecord(RecordMeta m, std::size_t layers, std::size_t hidden)
        : meta(std::move(m)), n_layers(layers), hidden_dim(hidden), writes(layers * hidden, 0.0) {}

    std::span<double> layer(std::size_t l) { return {writes.data() + l * hidden_dim, hidden_dim}; }
    std::span<const double> layer(std::size_t l) const { return {writes.data() + l * hidden_dim, hidden_dim}; }
};

// ---------------------------------------------------------------------------
// Manifest JSON

inline nlohmann::json to_json(const RecordMeta& m) {
    nlohmann::json j{{"example_id", m.example_id},
                     {"correct", m.correct},
                     {"msp", m.msp},
                     {"predicted_option", m.predicted_option},
                     {"gold_option", m.gold_option}};
    if (m.candidate_probs) {
        j["candidate_probs"] = *m.candidate_probs;
    }
    return j;
}

inline RecordMeta record_meta_from_json(const nlohmann::json& j) {
    RecordMeta m;
    m.example_id = j.at("example_id").get<std::string>();
    m.correct = j.at("correct").get<bool>();
    m.msp = j.at("msp").get<double>();
    m.predicted_option = j.at("predicted_option").get<int>();
    m.gold_option = j.at("gold_option").get<int>();
    if (j.contains("candidate_probs") && !j.at("candidate_probs").is_null()) {
        m.candidate_probs = j.at("candidate_probs").get<std::vector<double>>();
    }
    return m;
}

inline nlohmann::json to_json(const TraceManifest& m) {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : m.records) {
        recs.push_back(to_json(r));
    }
    return {{"format", "TRAJ1"},
            {"model_id", m.model_id},
            {"dataset_id", m.dataset_id},
            {"n_examples", m.n_examples},
            {"n_layers", m.n_layers},
            {"hidden_dim", m.hidden_dim},
            {"dtype", to_string(m.dtype)},
            {"attributes", m.attributes},
            {"records", std::move(recs)}};
}

inline TraceManifest manifest_from_json(const nlohmann::json& j) {
    TraceManifest m;
    try {
        m.model_id = j.at("model_id").get<std::string>();
        m.dataset_id = j.at("dataset_id").get<std::string>();
        m.n_examples = j.at("n_examples").get<std::size_t>();
        m.n_layers = j.at("n_layers").get<std::size_t>();
        m.hidden_dim = j.at("hidden_dim").get<std::size_t>();
        m.dtype = parse_dtype(j.at("dtype").get<std::string>());
        if (j.contains("attributes")) {
            m.attributes = j.at("attributes");
        }
        for (const auto& r : j.at("records")) {
            m.records.push_back(record_meta_from_json(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    }
    if (m.records.size() != m.n_examples) {
        throw FormatError("manifest n_examples disagrees with record list");
    }
    if (m.n_layers < 2 || m.hidden_dim < 1) {
        throw FormatError("manifest requires n_layers >= 2 and hidden_dim >= 1");
    }
    return m;
}

// ---------------------------------------------------------------------------
// Writing

namespace detail {

inline void check_record_shape(const TraceManifest& manifest, const TrajectoryRecord& rec) {
    if (rec.n_layers != manifest.n_layers || rec.hidden_dim != manifest.hidden_dim ||
        rec.writes.size() != manifest.record_values()) {
        throw DimensionError("record '" + rec.meta.example_id + "' has shape " + std::to_string(rec.n_layers) + "x" +
                             std::to_string(rec.hidden_dim) + ", manifest expects " +
                             std::to_string(manifest.n_layers) + "x" + std::to_string(manifest.hidden_dim));
    }
}

inline void check_record_finite(const TrajectoryRecord& rec, Dtype dtype) {
    for (double v : rec.writes) {
        if (!std::isfinite(v)) {
            throw DataError("record '" + rec.meta.example_id + "' contains a non-finite write entry");
        }
        if (dtype == Dtype::f16 && !std::isfinite(io::half_to_float(io::float_to_half(static_cast<float>(v))))) {
            throw DataError("record '" + rec.meta.example_id + "' overflows f16 storage");
        }
        if (dtype == Dtype::f32 && !std::isfinite(static_cast<float>(v))) {
            throw DataError("record '" + rec.meta.example_id + "' overflows f32 storage");
        }
    }
}

} // namespace detail

/// Streaming writer: the manifest (with every RecordMeta) goes first, then
/// records are appended in manifest order. finish() checks the count.
class TraceWriter {
public:
    TraceWriter(const std::filesystem::path& path, TraceManifest manifest)
        : manifest_(std::move(manifest)), out_(path, std::ios::binary | std::ios::trunc) {
        if (manifest_.records.size() != manifest_.n_examples) {
            throw DimensionError("manifest n_examples disagrees with record list");
        }
        if (manifest_.n_layers < 2 || manifest_.hidden_dim < 1) {
            throw DimensionError("trace requires n_layers >= 2 and hidden_dim >= 1");
        }
        if (!out_) {
            throw Error("cannot open '" + path.string() + "' for writing");
        }
        io::write_framed_header(out_, kTraceMagic, to_json(manifest_).dump());
    }

    void append(const TrajectoryRecord& rec) {
        if (written_ >= manifest_.n_examples) {
            throw DimensionError("more records than manifest n_examples");
        }
        detail::check_record_shape(manifest_, rec);
        detail::check_record_finite(rec, manifest_.dtype);
        if (manifest_.dtype == Dtype::f32) {
            for (double v : rec.writes) io::put_f32(out_, static_cast<float>(v));
        } else {
            for (double v : rec.writes) io::put_le(out_, io::float_to_half(static_cast<float>(v)));
        }
        ++written_;
    }

    void finish() {
        if (written_ != manifest_.n_examples) {
            throw DimensionError("wrote " + std::to_string(written_) + " records, manifest declares " +
                                 std::to_string(manifest_.n_examples));
        }
        out_.flush();
        if (!out_) {
            throw Error("write failed");
        }
        out_.close();
    }

private:
    TraceManifest manifest_;
    std::ofstream out_;
    std::size_t written_ = 0;
};

/// Writes a complete container. All records are checked before the file is
/// touched, so a failing call leaves no partial output.
inline void write_trace(const TraceManifest& manifest, std::span<const TrajectoryRecord> records,
                        const std::filesystem::path& path) {
    if (records.size() != manifest.n_examples || manifest.records.size() != manifest.n_examples) {
        throw DimensionError("manifest declares " + std::to_string(manifest.n_examples) + " records, stream has " +
                             std::to_string(records.size()));
    }
    for (const auto& r : records) {
        detail::check_record_shape(manifest, r);
        detail::check_record_finite(r, manifest.dtype);
    }
    TraceWriter writer(path, manifest);
    for (const auto& r : records) writer.append(r);
    writer.finish();
}

/// Builds a manifest whose record list mirrors the metadata of `records`.
inline TraceManifest make_manifest(std::string model_id, std::string dataset_id, std::size_t n_layers,
                                   std::size_t hidden_dim, Dtype dtype, std::span<const TrajectoryRecord> records) {
    TraceManifest m;
    m.model_id = std::move(model_id);
    m.dataset_id = std::move(dataset_id);
    m.n_examples = records.size();
    m.n_layers = n_layers;
    m.hidden_dim = hidden_dim;
    m.dtype = dtype;
    m.records.reserve(records.size());
    for (const auto& r : records) m.records.push_back(r.meta);
    return m;
}

// ---------------------------------------------------------------------------
// Reading

/// Random-access reader. Safe to share between threads.
class TraceReader {
public:
    explicit TraceReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) {
            throw FormatError("cannot open '" + path.string() + "'");
        }
        const std::string text = io::read_framed_header(in_, kTraceMagic);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
        }
        manifest_ = manifest_from_json(j);
        payload_offset_ = 16 + text.size();

        std::error_code ec;
        const auto file_size = std::filesystem::file_size(path, ec);
        if (ec) {
            throw FormatError("cannot stat '" + path.string() + "'");
        }
        const std::uint64_t expected = payload_offset_ + manifest_.payload_bytes();
        if (file_size < expected) {
            throw FormatError("truncated payload: expected " + std::to_string(expected) + " bytes, file has " +
                              std::to_string(file_size));
        }
        if (file_size > expected) {
            throw FormatError("payload larger than manifest declares (" + std::to_string(file_size) + " > " +
                              std::to_string(expected) + " bytes)");
        }
    }

    const TraceManifest& manifest() const { return manifest_; }
    std::size_t size() const { return manifest_.n_examples; }

    TrajectoryRecord record(std::size_t i) const {
        if (i >= manifest_.n_examples) {
            throw DataError("record index out of range");
        }
        const std::size_t values = manifest_.record_values();
        const std::size_t width = dtype_size(manifest_.dtype);
        std::vector<unsigned char> buf(values * width);
        {
            std::lock_guard lock(mutex_);
            in_.clear();
            in_.seekg(static_cast<std::streamoff>(payload_offset_ + i * values * width));
            in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
            if (in_.gcount() != static_cast<std::streamsize>(buf.size())) {
                throw FormatError("truncated payload at record " + std::to_string(i));
            }
        }
        TrajectoryRecord rec(manifest_.records[i], manifest_.n_layers, manifest_.hidden_dim);
        for (std::size_t k = 0; k < values; ++k) {
            const unsigned char* p = buf.data() + k * width;
            if (manifest_.dtype == Dtype::f32) {
                rec.writes[k] = static_cast<double>(std::bit_cast<float>(io::load_le<std::uint32_t>(p)));
            } else {
                rec.writes[k] = static_cast<double>(io::half_to_float(io::load_le<std::uint16_t>(p)));
            }
        }
        return rec;
    }

    std::vector<TrajectoryRecord> read_all() const {
        std::vector<TrajectoryRecord> out;
        out.reserve(size());
        for (std::size_t i = 0; i < size(); ++i) out.push_back(record(i));
        return out;
    }

private:
    std::filesystem::path path_;
    mutable std::ifstream in_;
    mutable std::mutex mutex_;
    TraceManifest manifest_;
    std::uint64_t payload_offset_ = 0;
};

struct TraceData {
    TraceManifest manifest;
    std::vector<TrajectoryRecord> records;
};

inline TraceData read_trace(const std::filesystem::path& path) {
    TraceReader reader(path);
    return {reader.manifest(), reader.read_all()};
}

// ---------------------------------------------------------------------------
// Validation

inline constexpr double kZeroWriteNorm = 1e-12;
inline constexpr double kZeroDisplacementNorm = 1e-9;
inline constexpr double kProbTolerance = 1e-6;

/// Every invariant of RecordMeta / TrajectoryRecord that `rec` violates, as
/// human-readable reasons. Empty means valid.
inline std::vector<std::string> record_violations(const TrajectoryRecord& rec) {
    std::vector<std::string> reasons;
    const auto& m = rec.meta;

    if (rec.writes.size() != rec.n_layers * rec.hidden_dim) {
        reasons.emplace_back("write payload has wrong size");
        return reasons;
    }
    const bool finite = std::all_of(rec.writes.begin(), rec.writes.end(), [](double v) { return std::isfinite(v); });
    if (!finite) {
        reasons.emplace_back("non-finite write entry");
    } else {
        bool any_nonzero = false;
        std::vector<double> total(rec.hidden_dim, 0.0);
        for (std::size_t l = 0; l < rec.n_layers; ++l) {
            double sq = 0.0;
            auto v = rec.layer(l);
            for (std::size_t h = 0; h < rec.hidden_dim; ++h) {
                sq += v[h] * v[h];
                total[h] += v[h];
            }
            any_nonzero = any_nonzero || std::sqrt(sq) > kZeroWriteNorm;
        }
        if (!any_nonzero) {
            reasons.emplace_back("all write-vectors are zero");
        }
        double tsq = 0.0;
        for (double t : total) tsq += t * t;
        if (std::sqrt(tsq) <= kZeroDisplacementNorm) {
            reasons.emplace_back("zero total displacement");
        }
    }

    if (!std::isfinite(m.msp) || m.msp < 0.0 || m.msp > 1.0) {
        reasons.emplace_back("msp outside [0,1]");
    }
    if (m.predicted_option < 0 || m.gold_option < 0) {
        reasons.emplace_back("negative option index");
    }
    if (m.candidate_probs) {
        const auto& p = *m.candidate_probs;
        if (p.empty()) {
            reasons.emplace_back("empty candidate_probs");
        } else {
            double sum = 0.0;
            bool in_range = true;
            for (double q : p) {
                sum += q;
                in_range = in_range && std::isfinite(q) && q >= 0.0 && q <= 1.0;
            }
            if (!in_range) {
                reasons.emplace_back("candidate probability outside [0,1]");
            }
            if (std::abs(sum - 1.0) > kProbTolerance) {
                reasons.emplace_back("candidate_probs do not sum to 1");
            }
            const double top = *std::max_element(p.begin(), p.end());
            if (!(std::abs(top - m.msp) <= kProbTolerance)) {
                reasons.emplace_back("msp differs from max(candidate_probs)");
            }
            const auto k = static_cast<int>(p.size());
            if (m.predicted_option >= k || m.gold_option >= k) {
                reasons.emplace_back("option index outside candidate set");
            }
        }
    }
    if (m.correct != (m.predicted_option == m.gold_option)) {
        reasons.emplace_back("correct flag disagrees with predicted/gold options");
    }
    return reasons;
}

struct InvalidRecord {
    std::size_t index = 0;
    std::string example_id;
    std::vector<std::string> reasons;
};

struct ValidationReport {
    std::string model_id;
    std::string dataset_id;
    std::size_t n_examples = 0;
    std::size_t n_layers = 0;
    std::size_t hidden_dim = 0;
    Dtype dtype = Dtype::f32;
    std::size_t n_errors = 0;
    double error_rate = 0.0;
    // Ten equal-width bins over [0,1]; out-of-range msp values are not counted.
    std::array<std::size_t, 10> msp_histogram{};
    std::vector<InvalidRecord> invalid;

    bool ok() const { return invalid.empty(); }
};

inline ValidationReport validate_trace(const std::filesystem::path& path) {
    TraceReader reader(path);
    const auto& man = reader.manifest();
    ValidationReport rep;
    rep.model_id = man.model_id;
    rep.dataset_id = man.dataset_id;
    rep.n_examples = man.n_examples;
    rep.n_layers = man.n_layers;
    rep.hidden_dim = man.hidden_dim;
    rep.dtype = man.dtype;
    for (std::size_t i = 0; i < reader.size(); ++i) {
        const auto rec = reader.record(i);
        if (!rec.meta.correct) ++rep.n_errors;
        if (std::isfinite(rec.meta.msp) && rec.meta.msp >= 0.0 && rec.meta.msp <= 1.0) {
            const auto bin = std::min<std::size_t>(9, static_cast<std::size_t>(rec.meta.msp * 10.0));
            ++rep.msp_histogram[bin];
        }
        auto reasons = record_violations(rec);
        if (!reasons.empty()) {
            rep.invalid.push_back({i, rec.meta.example_id, std::move(reasons)});
        }
    }
    rep.error_rate = rep.n_examples ? static_cast<double>(rep.n_errors) / static_cast<double>(rep.n_examples) : 0.0;
    return rep;
}

inline nlohmann::json to_json(const ValidationReport& r) {
    nlohmann::json inv = nlohmann::json::array();
    for (const auto& x : r.invalid) {
        inv.push_back({{"index", x.index}, {"example_id", x.example_id}, {"reasons", x.reasons}});
    }
    return {{"model_id", r.model_id},
            {"dataset_id", r.dataset_id},
            {"n_examples", r.n_examples},
            {"n_layers", r.n_layers},
            {"hidden_dim", r.hidden_dim},
            {"dtype", to_string(r.dtype)},
            {"n_errors", r.n_errors},
            {"error_rate", r.error_rate},
            {"msp_histogram", r.msp_histogram},
            {"invalid", std::move(inv)},
            {"ok", r.ok()}};
}

} // namespace trajprobe
