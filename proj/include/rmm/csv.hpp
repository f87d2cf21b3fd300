#pragma once

#include <charconv>
#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "errors.hpp"

namespace rmm {

// Shortest round-trip decimal form; independent of the global locale.
inline std::string format_number(double x) {
    char buffer[32];
    const auto [end, ec] = std::to_chars(buffer, buffer + sizeof buffer, x);
    if (ec != std::errc()) throw NumericalError("number formatting failed");
    return {buffer, end};
}

// RFC-4180 field quoting: fields holding a comma, quote, CR or LF are quoted
// and embedded quotes doubled.
inline std::string csv_field(std::string_view field) {
    if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

// Table with a fixed header; rows must match the header width. Lines end in LF.
class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

    void add_row(const std::vector<double>& values) {
        std::vector<std::string> fields;
        fields.reserve(values.size());
        for (double v : values) fields.push_back(format_number(v));
        add_row(std::move(fields));
    }

    void add_row(std::vector<std::string> fields) {
        if (fields.size() != header_.size()) throw NumericalError("CSV row width differs from header");
        rows_.push_back(std::move(fields));
    }

    std::size_t size() const { return rows_.size(); }

    // `preamble` becomes a leading '#' comment line (the run configuration).
    std::string str(std::string_view preamble = {}) const {
        std::string out;
        if (!preamble.empty()) {
            out += "# ";
            out += preamble;
            out += '\n';
        }
        append_line(out, header_);
        for (const auto& row : rows_) append_line(out, row);
        return out;
    }

    void write(const std::string& path, std::string_view preamble = {}) const {
        std::ofstream file(path, std::ios::binary);
        if (!file) throw ConfigError("cannot write " + path);
        file << str(preamble);
        if (!file) throw ConfigError("failed writing " + path);
    }

private:
    static void append_line(std::string& out, const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i > 0) out += ',';
            out += csv_field(fields[i]);
        }
        out += '\n';
    }

    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

} // namespace rmm
