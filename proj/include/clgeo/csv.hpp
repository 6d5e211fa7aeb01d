#pragma once

#include <string>
#include <vector>

namespace clgeo {

// Shortest round-trippable decimal form ("%.17g"); "nan" for NaN.
std::string format_double(double v);
double parse_double(const std::string& s);

// Writes to path.tmp and renames over path.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

    void add_row(std::vector<std::string> row);
    const std::vector<std::string>& header() const { return header_; }
    const std::vector<std::vector<std::string>>& rows() const { return rows_; }
    std::size_t column(const std::string& name) const;

    std::string str() const;
    void write(const std::string& path) const;
    static CsvTable read(const std::string& path);
    static CsvTable parse(const std::string& text);

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

}  // namespace clgeo
