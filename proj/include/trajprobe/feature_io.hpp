#pragma once

// Feature table export.
//
// CSV:    header `example_id,correct,msp,f0_l1,f1_l1,...,f10_lL`, one row per
//         featurized example, correct as 0/1, reals with 17 significant digits.
// Binary: TRAJ1-style framing with magic "TRAJFT1\0", a JSON manifest carrying
//         ids/msp/correct/exclusions, then rows x (11 L) little-endian f64.

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajprobe/binary_io.hpp"
#include "trajprobe/errors.hpp"
#include "trajprobe/geometry.hpp"

namespace trajprobe {

inline constexpr std::array<char, 8> kFeatureMagic{'T', 'R', 'A', 'J', 'F', 'T', '1', '\0'};

enum class TableFormat { csv, bin };

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace detail {

inline std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline std::vector<std::string> csv_split(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            cells.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    cells.push_back(std::move(cur));
    return cells;
}

inline double parse_real(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) {
        throw FormatError("not a number: '" + s + "'");
    }
    return v;
}

} // namespace detail

inline void write_feature_csv(const FeatureTable& t, std::ostream& os) {
    os << "example_id,correct,msp";
    for (std::size_t l = 0; l < t.n_layers; ++l) {
        for (std::size_t j = 0; j < kNumFeatures; ++j) os << ',' << feature_column_label(j, l);
    }
    os << '\n';
    for (std::size_t i = 0; i < t.rows(); ++i) {
        os << detail::csv_quote(t.example_ids[i]) << ',' << (t.correct[i] ? 1 : 0) << ',' << format_real(t.msp[i]);
        for (double v : t.row(i)) os << ',' << format_real(v);
        os << '\n';
    }
}

inline FeatureTable read_feature_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty feature CSV");
    const auto header = detail::csv_split(line);
    if (header.size() < 3 || header[0] != "example_id" || header[1] != "correct" || header[2] != "msp" ||
        (header.size() - 3) % kNumFeatures != 0) {
        throw FormatError("feature CSV header must be example_id,correct,msp followed by 11*L feature columns");
    }
    FeatureTable t;
    t.n_layers = (header.size() - 3) / kNumFeatures;
    for (std::size_t l = 0; l < t.n_layers; ++l) {
        for (std::size_t j = 0; j < kNumFeatures; ++j) {
            if (header[3 + l * kNumFeatures + j] != feature_column_label(j, l)) {
                throw FormatError("unexpected feature column '" + header[3 + l * kNumFeatures + j] + "'");
            }
        }
    }
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = detail::csv_split(line);
        if (cells.size() != header.size()) throw FormatError("ragged feature CSV row");
        t.example_ids.push_back(cells[0]);
        if (cells[1] != "0" && cells[1] != "1") throw FormatError("correct must be 0 or 1");
        t.correct.push_back(cells[1] == "1");
        t.msp.push_back(detail::parse_real(cells[2]));
        for (std::size_t k = 3; k < cells.size(); ++k) t.values.push_back(detail::parse_real(cells[k]));
    }
    return t;
}

inline void write_feature_bin(const FeatureTable& t, std::ostream& os) {
    nlohmann::json excl = nlohmann::json::array();
    for (const auto& e : t.excluded) {
        excl.push_back({{"index", e.index}, {"example_id", e.example_id}, {"reason", e.reason}});
    }
    std::vector<int> correct(t.correct.begin(), t.correct.end());
    const nlohmann::json man{{"format", "TRAJ1-features"},
                             {"model_id", t.model_id},
                             {"dataset_id", t.dataset_id},
                             {"n_layers", t.n_layers},
                             {"n_rows", t.rows()},
                             {"n_cols", t.cols()},
                             {"example_ids", t.example_ids},
                             {"msp", t.msp},
                             {"correct", correct},
                             {"excluded", excl}};
    io::write_framed_header(os, kFeatureMagic, man.dump());
    for (double v : t.values) io::put_f64(os, v);
}

inline FeatureTable read_feature_bin(std::istream& is) {
    const auto text = io::read_framed_header(is, kFeatureMagic);
    FeatureTable t;
    std::size_t rows = 0;
    try {
        const auto man = nlohmann::json::parse(text);
        t.model_id = man.at("model_id").get<std::string>();
        t.dataset_id = man.at("dataset_id").get<std::string>();
        t.n_layers = man.at("n_layers").get<std::size_t>();
        rows = man.at("n_rows").get<std::size_t>();
        t.example_ids = man.at("example_ids").get<std::vector<std::string>>();
        t.msp = man.at("msp").get<std::vector<double>>();
        for (int c : man.at("correct").get<std::vector<int>>()) t.correct.push_back(c != 0);
        for (const auto& e : man.at("excluded")) {
            t.excluded.push_back(
                {e.at("index").get<std::size_t>(), e.at("example_id").get<std::string>(), e.at("reason").get<std::string>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed feature manifest: ") + e.what());
    }
    if (t.example_ids.size() != rows || t.msp.size() != rows || t.correct.size() != rows) {
        throw FormatError("feature manifest column lengths disagree");
    }
    t.values.resize(rows * t.cols());
    for (auto& v : t.values) v = std::bit_cast<double>(io::get_le<std::uint64_t>(is));
    if (is.peek() != std::char_traits<char>::eof()) {
        throw FormatError("feature payload larger than manifest declares");
    }
    return t;
}

inline void save_feature_table(const FeatureTable& t, const std::filesystem::path& path, TableFormat fmt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    if (fmt == TableFormat::csv) {
        write_feature_csv(t, os);
    } else {
        write_feature_bin(t, os);
    }
    if (!os) throw Error("write to '" + path.string() + "' failed");
}

/// Loads either format, detected by the leading magic bytes.
inline FeatureTable load_feature_table(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path.string() + "'");
    std::array<char, 8> head{};
    is.read(head.data(), head.size());
    const bool is_bin = is.gcount() == 8 && head == kFeatureMagic;
    is.clear();
    is.seekg(0);
    return is_bin ? read_feature_bin(is) : read_feature_csv(is);
}

} // namespace trajprobe
