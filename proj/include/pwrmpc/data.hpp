#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pwrmpc/common.hpp"

namespace pwrmpc {

/// One labelled training sample: full state/input, observed residual, mode id (1-based).
struct DatasetRow {
    Vec x;
    Vec u;
    Vec d;
    int mode = 1;
};

using Dataset = std::vector<DatasetRow>;

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Writes the dataset in the canonical layout x_1..x_n,u_1..u_m,d_1..d_k,mode.
inline void save_dataset_csv(const std::string& path, const Dataset& rows) {
    if (rows.empty()) throw std::invalid_argument("save_dataset_csv: empty dataset");
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_dataset_csv: cannot open " + path);
    const auto& r0 = rows.front();
    for (int i = 0; i < r0.x.size(); ++i) f << "x_" << (i + 1) << ",";
    for (int i = 0; i < r0.u.size(); ++i) f << "u_" << (i + 1) << ",";
    for (int i = 0; i < r0.d.size(); ++i) f << "d_" << (i + 1) << ",";
    f << "mode\n";
    for (const auto& r : rows) {
        if (r.x.size() != r0.x.size() || r.u.size() != r0.u.size() || r.d.size() != r0.d.size())
            throw std::invalid_argument("save_dataset_csv: inconsistent row dimensions");
        for (int i = 0; i < r.x.size(); ++i) f << format_double(r.x[i]) << ",";
        for (int i = 0; i < r.u.size(); ++i) f << format_double(r.u[i]) << ",";
        for (int i = 0; i < r.d.size(); ++i) f << format_double(r.d[i]) << ",";
        f << r.mode << "\n";
    }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

inline Dataset load_dataset_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_dataset_csv: cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("load_dataset_csv: empty file " + path);
    const auto header = split_csv_line(line);
    int nx = 0, nu = 0, nd = 0;
    for (const auto& h : header) {
        if (h.rfind("x_", 0) == 0) ++nx;
        else if (h.rfind("u_", 0) == 0) ++nu;
        else if (h.rfind("d_", 0) == 0) ++nd;
        else if (h != "mode")
            throw std::runtime_error("load_dataset_csv: unexpected column '" + h + "' in " + path);
    }
    if (nd == 0 || header.back() != "mode")
        throw std::runtime_error("load_dataset_csv: header must end with residual columns and 'mode'");
    Dataset rows;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (static_cast<int>(cells.size()) != nx + nu + nd + 1)
            throw std::runtime_error("load_dataset_csv: wrong cell count at line " + std::to_string(lineno));
        DatasetRow r;
        r.x = Vec(nx);
        r.u = Vec(nu);
        r.d = Vec(nd);
        int c = 0;
        for (int i = 0; i < nx; ++i) r.x[i] = std::stod(cells[c++]);
        for (int i = 0; i < nu; ++i) r.u[i] = std::stod(cells[c++]);
        for (int i = 0; i < nd; ++i) r.d[i] = std::stod(cells[c++]);
        r.mode = std::stoi(cells[c]);
        if (r.mode < 1) throw std::runtime_error("load_dataset_csv: mode must be >= 1 at line " + std::to_string(lineno));
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace pwrmpc
