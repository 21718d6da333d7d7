/* Copyright 2026 The divens Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "divens/archive.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "divens/errors.hpp"

namespace divens {

std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

void TensorArchive::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : header) {
    if (k == key) {
      v = value;
      return;
    }
  }
  header.emplace_back(key, value);
}

std::optional<std::string> TensorArchive::get(const std::string& key) const {
  for (const auto& [k, v] : header)
    if (k == key) return v;
  return std::nullopt;
}

std::string TensorArchive::require(const std::string& key) const {
  auto v = get(key);
  if (!v) throw FormatError("archive header is missing key '" + key + "'", 0);
  return *v;
}

const Matrix* TensorArchive::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

std::string TensorArchive::serialize() const {
  std::ostringstream os;
  os << "divens-archive 1\n";
  for (const auto& [k, v] : header) os << "header " << k << ' ' << v << '\n';
  for (const auto& [name, m] : tensors) {
    os << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) {
        if (c) os << ' ';
        os << hexfloat(m(r, c));
      }
      os << '\n';
    }
  }
  os << "end\n";
  return os.str();
}

TensorArchive TensorArchive::deserialize(const std::string& text) {
  TensorArchive out;
  std::istringstream is(text);
  std::string line;
  std::uint64_t offset = 0;      // end of the consumed input
  std::uint64_t line_start = 0;  // first byte of `line`
  auto next_line = [&]() -> bool {
    if (!std::getline(is, line)) return false;
    line_start = offset;
    offset += line.size() + 1;
    return true;
  };
  if (!next_line() || line != "divens-archive 1") {
    throw FormatError("not a divens archive", 0);
  }
  bool ended = false;
  while (next_line()) {
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "header") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      out.header.emplace_back(key, value);
    } else if (kind == "tensor") {
      std::string name;
      std::size_t rows = 0, cols = 0;
      if (!(ls >> name >> rows >> cols)) {
        throw FormatError("malformed tensor line", line_start);
      }
      std::vector<double> values;
      values.reserve(rows * cols);
      for (std::size_t r = 0; r < rows; ++r) {
        if (!next_line()) throw FormatError("truncated tensor " + name, offset);
        const char* p = line.c_str();
        for (std::size_t c = 0; c < cols; ++c) {
          char* end = nullptr;
          const double v = std::strtod(p, &end);
          if (end == p) {
            while (*p == ' ') ++p;
            throw FormatError("bad value in tensor " + name,
                              line_start + static_cast<std::uint64_t>(p - line.c_str()));
          }
          values.push_back(v);
          p = end;
        }
      }
      out.tensors.emplace_back(name, Matrix(rows, cols, std::move(values)));
    } else {
      throw FormatError("unknown archive record '" + kind + "'", line_start);
    }
  }
  if (!ended) throw FormatError("archive is missing its end marker", offset);
  return out;
}

void TensorArchive::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os << serialize();
}

TensorArchive TensorArchive::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

}  // namespace divens
