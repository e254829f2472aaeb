#pragma once

// Output helpers: CSV with fixed formatting (comma separator, dot decimal,
// header row, LF line endings) and the sparse triplet export for Ulam
// matrices. All doubles go through fmt_double so reruns are byte-identical.

#include "feq/common.hpp"
#include "feq/thermo.hpp"

#include <fstream>
#include <string>
#include <vector>

namespace feq {

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header)
        : out_(path, std::ios::binary) {
        if (!out_) throw Error(2, "cannot open output file " + path);
        write_row_strings(header);
    }

    void write_row_strings(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

    void write_row(const std::vector<double>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << fmt_double(cells[i]);
        }
        out_ << '\n';
    }

    /// Mixed row: leading string cells, then numeric cells.
    void write_row(const std::vector<std::string>& head, const std::vector<double>& tail) {
        for (std::size_t i = 0; i < head.size(); ++i) {
            if (i) out_ << ',';
            out_ << head[i];
        }
        for (double v : tail) out_ << ',' << fmt_double(v);
        out_ << '\n';
    }

private:
    std::ofstream out_;
};

/// Sparse triplet text format: a header line with dimensions and seed,
/// then one `i j value` line per stored entry.
inline void write_ulam_triplets(const std::string& path, const UlamMatrix& U) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(2, "cannot open output file " + path);
    out << "# ulam " << U.P.rows() << ' ' << U.P.cols() << " samples_per_cell "
        << U.samples_per_cell << " seed " << U.seed << '\n';
    for (int i = 0; i < U.P.outerSize(); ++i)
        for (SparseMatrix::InnerIterator it(U.P, i); it; ++it)
            out << it.row() << ' ' << it.col() << ' ' << fmt_double(it.value()) << '\n';
}

inline UlamMatrix read_ulam_triplets(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(2, "cannot open " + path);
    std::string hash, tag, sp_tag, seed_tag;
    long rows = 0, cols = 0;
    UlamMatrix U;
    in >> hash >> tag >> rows >> cols >> sp_tag >> U.samples_per_cell >> seed_tag >> U.seed;
    if (hash != "#" || tag != "ulam") throw SchemaError("triplet file: bad header in " + path);
    std::vector<Eigen::Triplet<double>> trips;
    long i, j;
    double v;
    while (in >> i >> j >> v) trips.emplace_back(static_cast<int>(i), static_cast<int>(j), v);
    U.P.resize(rows, cols);
    U.P.setFromTriplets(trips.begin(), trips.end());
    return U;
}

} // namespace feq
