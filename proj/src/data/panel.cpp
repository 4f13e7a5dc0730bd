#include "d2pcca/data/panel.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "d2pcca/errors.hpp"
#include "json.hpp"

namespace d2pcca::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && ptr == end && std::isfinite(out);
}

}  // namespace

std::size_t PanelDataset::dim() const {
    std::size_t p = 0;
    for (const auto& s : sets) p += s.columns.size();
    return p;
}

std::vector<std::size_t> PanelDataset::obs_dims() const {
    std::vector<std::size_t> d;
    for (const auto& s : sets) d.push_back(s.columns.size());
    return d;
}

std::vector<std::string> PanelDataset::columns() const {
    std::vector<std::string> c;
    for (const auto& s : sets) c.insert(c.end(), s.columns.begin(), s.columns.end());
    return c;
}

void PanelDataset::validate() const {
    if (sets.empty()) throw DataError("dataset has no observation sets");
    std::set<std::string> seen;
    for (const auto& s : sets) {
        if (s.columns.empty()) throw DataError("set '" + s.name + "' has no columns");
        for (const auto& c : s.columns)
            if (!seen.insert(c).second) throw DataError("column '" + c + "' is assigned to more than one set");
    }
    if (values.rank() != 2 || values.dim(0) != rows() || values.dim(1) != dim())
        throw DataError("dataset values do not match " + std::to_string(rows()) + " rows x " +
                        std::to_string(dim()) + " columns");
    if (!values.all_finite()) throw DataError("dataset contains missing or non-finite values");
    for (std::size_t r = 1; r < rows(); ++r)
        if (!(timestamps[r - 1] < timestamps[r]))
            throw DataError("timestamps are not increasing at row " + std::to_string(r + 1) + " ('" +
                            timestamps[r - 1] + "' then '" + timestamps[r] + "')");
    if (split > rows()) throw DataError("split index exceeds the number of rows");
}

std::vector<ObservationSet> read_manifest(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest " + path.string());
    try {
        const json j = json::parse(f);
        std::vector<ObservationSet> sets;
        for (const json& s : j.at("sets"))
            sets.push_back({s.at("name").get<std::string>(), s.at("columns").get<std::vector<std::string>>()});
        if (sets.empty()) throw DataError("manifest " + path.string() + " lists no sets");
        return sets;
    } catch (const json::exception& e) {
        throw DataError("malformed manifest " + path.string() + ": " + e.what());
    }
}

void write_manifest(const fs::path& path, const std::vector<ObservationSet>& sets) {
    json j = {{"sets", json::array()}};
    for (const auto& s : sets) j["sets"].push_back({{"name", s.name}, {"columns", s.columns}});
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << j.dump(2) << '\n';
    if (!f) throw IoError("failed writing " + path.string());
}

PanelDataset load_panel(const fs::path& table, const fs::path& manifest) {
    PanelDataset d;
    d.sets = read_manifest(manifest);

    std::ifstream f(table);
    if (!f) throw IoError("cannot open table " + table.string());
    std::string line;
    if (!std::getline(f, line)) throw DataError("table " + table.string() + " is empty");
    std::vector<std::string> header = split_fields(line);
    for (auto& h : header) h = trim(h);
    if (header.empty() || header.front() != "date")
        throw DataError("table " + table.string() + ": first column must be named 'date'");
    std::map<std::string, std::size_t> where;
    for (std::size_t c = 1; c < header.size(); ++c)
        if (!where.emplace(header[c], c).second) throw DataError("table column '" + header[c] + "' appears twice");

    std::vector<std::size_t> source;  // file column for each dataset column
    std::set<std::string> assigned;
    for (const auto& s : d.sets) {
        if (s.columns.empty()) throw DataError("manifest set '" + s.name + "' has no columns");
        for (const auto& c : s.columns) {
            const auto it = where.find(c);
            if (it == where.end()) throw DataError("manifest column '" + c + "' is not in " + table.string());
            if (!assigned.insert(c).second) throw DataError("column '" + c + "' is assigned to more than one set");
            source.push_back(it->second);
        }
    }

    std::vector<double> values;
    std::size_t row = 0;
    while (std::getline(f, line)) {
        if (trim(line).empty()) continue;
        ++row;
        const std::vector<std::string> fields = split_fields(line);
        if (fields.size() != header.size())
            throw DataError("table row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                            " fields, header has " + std::to_string(header.size()));
        d.timestamps.push_back(trim(fields[0]));
        for (std::size_t k = 0; k < source.size(); ++k) {
            double v = 0.0;
            if (!parse_double(trim(fields[source[k]]), v))
                throw DataError("missing or non-numeric value in column '" + header[source[k]] + "' at row " +
                                std::to_string(row) + " (date " + d.timestamps.back() + ")");
            values.push_back(v);
        }
    }
    d.values = Tensor(diff::Shape{d.timestamps.size(), source.size()}, std::move(values));
    d.validate();
    return d;
}

void write_table(const fs::path& path, const PanelDataset& d) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "date";
    for (const auto& c : d.columns()) f << ',' << c;
    f << '\n';
    char buf[32];
    for (std::size_t r = 0; r < d.rows(); ++r) {
        f << d.timestamps[r];
        for (std::size_t k = 0; k < d.dim(); ++k) {
            std::snprintf(buf, sizeof(buf), "%.17g", d.values.at(r, k));
            f << ',' << buf;
        }
        f << '\n';
    }
    if (!f) throw IoError("failed writing " + path.string());
}

std::size_t split_for_test_rows(const PanelDataset& dataset, std::size_t test_rows) {
    if (test_rows >= dataset.rows())
        throw DataError("test rows (" + std::to_string(test_rows) + ") leave no training rows out of " +
                        std::to_string(dataset.rows()));
    return dataset.rows() - test_rows;
}

}  // namespace d2pcca::data
